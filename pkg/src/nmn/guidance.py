"""Ground-truth construction, the teacher-forcing schedule, and the multi-task loss."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .program import ANSWER, ATTENTION, BOOLEAN

Box = Tuple[float, float, float, float]


def iou(a: Box, b: Box) -> float:
    """Intersection over union; degenerate (zero-area) boxes overlap nothing."""
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(gt: np.ndarray, det: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    det = np.asarray(det, dtype=np.float64).reshape(-1, 4)
    area_g = np.clip(gt[:, 2] - gt[:, 0], 0, None) * np.clip(gt[:, 3] - gt[:, 1], 0, None)
    area_d = np.clip(det[:, 2] - det[:, 0], 0, None) * np.clip(det[:, 3] - det[:, 1], 0, None)
    iw = np.minimum(gt[:, None, 2], det[None, :, 2]) - np.maximum(gt[:, None, 0], det[None, :, 0])
    ih = np.minimum(gt[:, None, 3], det[None, :, 3]) - np.maximum(gt[:, None, 1], det[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_g[:, None] + area_d[None, :] - inter
    valid = (area_g[:, None] > 0) & (area_d[None, :] > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(valid & (union > 0), inter / union, 0.0)
    return out


@dataclass
class MatchConfig:
    mode: str = "soft"
    tau: float = 0.5

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"match mode must be hard or soft, got {self.mode!r}")
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")


@dataclass
class AttentionTarget:
    mode: str
    n: int
    indices: Tuple[int, ...]  # matched detector boxes

    @property
    def empty(self) -> bool:
        return len(self.indices) == 0

    def multi_hot(self) -> np.ndarray:
        v = np.zeros((self.n, 1))
        v[list(self.indices)] = 1.0
        return v

    def distribution(self) -> np.ndarray:
        """Uniform over matched boxes (uniform over all boxes when nothing matched)."""
        v = np.zeros((self.n, 1))
        if self.empty:
            v[:] = 1.0 / self.n
        else:
            v[list(self.indices)] = 1.0 / len(self.indices)
        return v


def hard_match(gt_boxes, det_boxes) -> AttentionTarget:
    """Each ground-truth box picks its highest-IoU detector box (lowest index on ties)."""
    det = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    if len(det) == 0:
        raise ValueError("hard_match needs at least one detector box")
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    hits = set()
    if len(gt):
        m = iou_matrix(gt, det)
        best = m.argmax(axis=1)  # first maximum -> lowest index
        for g, j in enumerate(best):
            if m[g, j] > 0:
                hits.add(int(j))
    return AttentionTarget("hard", len(det), tuple(sorted(hits)))


def soft_match(gt_boxes, det_boxes, tau: float = 0.5) -> AttentionTarget:
    """Every detector box whose IoU with some ground-truth box exceeds ``tau``."""
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    det = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt) == 0:
        return AttentionTarget("soft", len(det), ())
    m = iou_matrix(gt, det)
    hits = np.flatnonzero((m > tau).any(axis=0))
    return AttentionTarget("soft", len(det), tuple(int(i) for i in hits))


def match(gt_boxes, det_boxes, cfg: MatchConfig) -> AttentionTarget:
    if cfg.mode == "hard":
        return hard_match(gt_boxes, det_boxes)
    return soft_match(gt_boxes, det_boxes, cfg.tau)


# ---------------------------------------------------------------------------
# epsilon schedule


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    horizon: float = 10
    floor: float = 0.0
    value: float = 1.0  # used by kind == "constant"
    steepness: float = 5.0  # inverse_sigmoid only

    def __post_init__(self):
        if self.kind not in ("linear", "exponential", "inverse_sigmoid", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.horizon <= 0:
            raise ValueError(f"schedule horizon must be positive, got {self.horizon}")
        if not 0 <= self.floor <= 1:
            raise ValueError(f"schedule floor must lie in [0, 1], got {self.floor}")


def epsilon_schedule(e: int, cfg: ScheduleConfig) -> float:
    """Probability of feeding the ground-truth input at epoch ``e`` (0-based)."""
    if e < 0:
        raise ValueError("epoch must be non-negative")
    E = float(cfg.horizon)
    if cfg.kind == "constant":
        return float(cfg.value)
    if cfg.kind == "linear":
        return max(cfg.floor, 1.0 - e / E)
    if cfg.kind == "exponential":
        k = max(cfg.floor, 1e-3) ** (1.0 / E)
        return max(cfg.floor, k**e)
    # inverse sigmoid E / (E + exp(c e / E)), rescaled so that epoch 0 gives exactly 1
    c = cfg.steepness
    raw = lambda x: E / (E + math.exp(min(c * x / E, 700.0)))
    return max(cfg.floor, min(1.0, raw(e) / raw(0)))


# ---------------------------------------------------------------------------
# per-step targets


@dataclass
class StepTarget:
    """Ground truth for one program step: attention target, boolean, or answer string."""

    kind: str
    attention: Optional[AttentionTarget] = None
    boolean: Optional[float] = None
    answer: Optional[str] = None

    def value(self) -> np.ndarray:
        """The tensor fed downstream under teacher forcing."""
        if self.kind == ATTENTION:
            return self.attention.distribution()
        if self.kind == BOOLEAN:
            return np.full((1, 1), float(self.boolean))
        raise ValueError("answer steps are never fed forward")

    def to_dict(self) -> dict:
        if self.kind == ATTENTION:
            return {"kind": ATTENTION, "mode": self.attention.mode, "indices": list(self.attention.indices)}
        if self.kind == BOOLEAN:
            return {"kind": BOOLEAN, "value": self.boolean}
        return {"kind": ANSWER, "value": self.answer}


def build_targets(truth, scene, det_boxes, cfg: MatchConfig) -> List[StepTarget]:
    """Turn symbolic oracle outputs into detector-space targets for each step."""
    out = []
    for v in truth.steps:
        if isinstance(v, bool):
            out.append(StepTarget(BOOLEAN, boolean=1.0 if v else 0.0))
        elif isinstance(v, str):
            out.append(StepTarget(ANSWER, answer=v))
        else:
            obj_of = scene.slot_to_object()
            gt = [scene.objects[obj_of[s]].box for s in v]
            out.append(StepTarget(ATTENTION, attention=match(gt, det_boxes, cfg)))
    return out


def infer_boolean_targets(program, answer: str) -> List[Optional[StepTarget]]:
    """Boolean ground truth that can be inferred from the answer alone (external data).

    The terminal boolean equals yes/no; And=1 forces both inputs to 1 and
    Or=0 forces both inputs to 0.  Everything else stays unknown.
    """
    out: List[Optional[StepTarget]] = [None] * len(program.steps)
    last = program.steps[-1]
    if last.output_kind != BOOLEAN or answer not in ("yes", "no"):
        return out
    known = {last.index: 1.0 if answer == "yes" else 0.0}
    for step in reversed(program.steps):
        if step.index not in known:
            continue
        val = known[step.index]
        if (step.op == "And" and val == 1.0) or (step.op == "Or" and val == 0.0):
            for d in step.deps:
                known[d] = val
    for t, val in known.items():
        out[t] = StepTarget(BOOLEAN, boolean=val)
    return out


# ---------------------------------------------------------------------------
# multi-task loss


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("loss weights cannot all be zero")


GROUPS = ("att", "bool", "answer")


@dataclass
class LossBreakdown:
    L: dc.Node
    L_att: float
    L_bool: float
    L_answer: float
    per_opcode: Dict[Tuple[str, str], float] = field(default_factory=dict)
    counts: Dict[Tuple[str, str], int] = field(default_factory=dict)
    empty: bool = False

    @property
    def value(self) -> float:
        return float(self.L.value.item())


def instance_losses(trace, match_mode: str) -> List[Tuple[str, str, dc.Node]]:
    """(group, opcode, scalar loss node) for every step of one trace that has a target."""
    out = []
    for rec in trace.steps:
        gt = rec.gt
        if gt is None:
            continue
        out_mod = rec.output
        if rec.kind == ATTENTION:
            tgt = gt.attention
            if tgt is None or tgt.empty or out_mod.logits is None:
                continue
            if match_mode == "hard":
                loss = dc.cross_entropy(out_mod.logits, tgt.distribution())
            else:
                loss = dc.bce_logits(out_mod.logits, tgt.multi_hot())
            out.append(("att", rec.op, loss))
        elif rec.kind == BOOLEAN and gt.boolean is not None:
            out.append(("bool", rec.op, _boolean_loss(out_mod, gt.boolean)))
    ans = trace.answer_target
    if ans is not None:
        out.append(("answer", trace.steps[-1].op, trace.answer_loss(ans)))
    return out


def _boolean_loss(out_mod, target: float) -> dc.Node:
    if out_mod.logits is not None:
        return dc.bce_logits(out_mod.logits, np.full((1, 1), target))
    return dc.bce(out_mod.value, np.full((1, 1), target))


def multitask_loss(traces: Sequence, weights: LossWeights, match_cfg: MatchConfig) -> LossBreakdown:
    """Frequency-normalized weighted sum of attention, boolean and answer losses.

    Each opcode's instance losses are averaged first, then opcodes are
    averaged within their group, so a frequent opcode cannot dominate.
    """
    buckets: Dict[Tuple[str, str], List[dc.Node]] = {}
    for tr in traces:
        for group, op, node in instance_losses(tr, match_cfg.mode):
            buckets.setdefault((group, op), []).append(node)

    if not buckets:
        warnings.warn("multitask_loss: no step in the batch has a target", RuntimeWarning)
        return LossBreakdown(dc.constant(0.0), 0.0, 0.0, 0.0, {}, {}, empty=True)
    # the graph mirrors the definition (mean per opcode, mean over opcodes,
    # weighted sum over groups) so the reported terms are exactly its nodes
    op_nodes = {k: dc.total(v, [1.0 / len(v)] * len(v)) for k, v in buckets.items()}
    group_nodes = {}
    for g in GROUPS:
        ks = [k for k in op_nodes if k[0] == g]
        if ks:
            group_nodes[g] = dc.total([op_nodes[k] for k in ks], [1.0 / len(ks)] * len(ks))
    per_op = {k: float(n.value.item()) for k, n in op_nodes.items()}
    counts = {k: len(v) for k, v in buckets.items()}
    group_val = {g: float(group_nodes[g].value.item()) if g in group_nodes else 0.0 for g in GROUPS}
    group_w = {"att": weights.alpha, "bool": weights.beta, "answer": weights.gamma}
    # zero-weight groups stay out of the graph entirely
    keep = [g for g in GROUPS if g in group_nodes and group_w[g] != 0.0]
    L = dc.total([group_nodes[g] for g in keep], [group_w[g] for g in keep]) if keep else dc.constant(0.0)
    return LossBreakdown(L, group_val["att"], group_val["bool"], group_val["answer"], per_op, counts)
