"""Program instantiation and step-by-step execution with teacher forcing."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .guidance import StepTarget
from .modules import ModuleIO, ModuleOutput, NeuralModules
from .program import ANSWER, ATTENTION, BOOLEAN, CATALOG, Program, split_choices, validate_program
from .synthdata import NO, YES, FeatureSet

PREDICTED, GROUND_TRUTH = "predicted", "ground_truth"


class ExecutionError(RuntimeError):
    pass


class InvalidProgram(ExecutionError):
    pass


class MissingEmbedding(ExecutionError):
    pass


class VocabMismatch(ExecutionError):
    pass


class GroundTruthRequired(ExecutionError):
    pass


class NumericError(ExecutionError, FloatingPointError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass
class GuidancePolicy:
    epsilon: float = 0.0
    mode: str = "train"
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    granularity: str = "edge"  # or "program": one coin per execution
    detach: bool = True  # debug switch; False leaks gradient through substituted inputs

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.mode not in ("train", "inference"):
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.granularity not in ("edge", "program"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.mode == "inference":
            self.epsilon = 0.0


@dataclass
class ExecutablePlan:
    program: Program
    features: FeatureSet
    modules: object  # NeuralModules or any callable(op, ModuleIO) -> ModuleOutput
    answer_vocab: List[str]


def instantiate(p: Program, f: FeatureSet, modules, catalog=CATALOG) -> ExecutablePlan:
    """Bind a validated program to features and a module library (no numerics)."""
    diags = validate_program(p, catalog)
    if diags:
        raise InvalidProgram("; ".join(str(d) for d in diags))
    vocab = list(getattr(modules, "answer_vocab", None) or f.answer_vocab or [])
    if f.answer_vocab is not None and vocab != list(f.answer_vocab):
        raise VocabMismatch("feature set and module library disagree on the answer vocabulary")
    if isinstance(modules, NeuralModules) and (modules.d, modules.n_boxes) != (f.d, f.n_boxes):
        raise dc.ShapeError(f"modules expect d={modules.d}, n_boxes={modules.n_boxes}; features have d={f.d}, n_boxes={f.n_boxes}")
    for step in p.steps:
        if step.opcode.takes_text_arg and step.arg not in f.text_args:
            raise MissingEmbedding(f"step {step.index}: no embedding for text argument {step.arg!r}")
        if step.op in ("ChooseAttr", "ChooseName"):
            missing = [c for c in split_choices(step.arg) if c not in vocab]
            if missing:
                raise VocabMismatch(f"step {step.index}: candidates {missing} not in the answer vocabulary")
    if p.steps[-1].output_kind == BOOLEAN and not {YES, NO} <= set(vocab):
        raise VocabMismatch("boolean-terminal program needs 'yes' and 'no' answers")
    return ExecutablePlan(p, f, modules, vocab)


@dataclass
class StepRecord:
    index: int
    op: str
    arg: Optional[str]
    deps: tuple
    kind: str
    provenance: List[str]
    output: ModuleOutput
    gt: Optional[StepTarget] = None

    @property
    def values(self) -> np.ndarray:
        return self.output.value.value


@dataclass
class Trace:
    id: str
    steps: List[StepRecord]
    answer_vocab: List[str]
    answer_dist: np.ndarray
    predicted: str
    answer_target: Optional[str] = None

    @property
    def correct(self) -> bool:
        return self.answer_target is not None and self.predicted == self.answer_target

    def answer_loss(self, answer: str) -> dc.Node:
        last = self.steps[-1]
        out = last.output
        if last.kind == BOOLEAN:
            target = np.full((1, 1), 1.0 if answer == YES else 0.0)
            if out.logits is not None:
                return dc.bce_logits(out.logits, target)
            return dc.bce(out.value, target)
        idx = self.answer_vocab.index(answer)
        onehot = np.zeros((len(self.answer_vocab), 1))
        onehot[idx] = 1.0
        if out.logits is None:
            return dc.bce(out.value, onehot)
        return dc.cross_entropy(out.logits, onehot, out.mask)

    def provenances(self) -> List[str]:
        return [p for s in self.steps for p in s.provenance]

    def to_json(self) -> dict:
        steps = []
        for s in self.steps:
            rec = {
                "op": s.op,
                "arg": s.arg,
                "deps": list(s.deps),
                "provenance": list(s.provenance),
                "output": {"kind": s.kind, "values": [round(float(v), 6) for v in s.values.ravel()]},
            }
            if s.gt is not None:
                rec["gt"] = s.gt.to_dict()
            steps.append(rec)
        return {
            "id": self.id,
            "answer": self.answer_target,
            "predicted": self.predicted,
            "answer_dist": [round(float(v), 6) for v in self.answer_dist.ravel()],
            "steps": steps,
        }


def select_input(
    dep: int,
    outputs: Sequence[ModuleOutput],
    policy: GuidancePolicy,
    gt: Optional[Sequence[Optional[StepTarget]]],
    u: Optional[float] = None,
):
    """Coin flip for one dependency edge: ground truth with probability epsilon."""
    if u is None:
        u = policy.rng.random()
    target = gt[dep] if gt is not None else None
    if u < policy.epsilon and target is not None and target.kind != ANSWER:
        node = dc.overwrite(outputs[dep].value, target.value())
        if policy.detach:
            node = dc.detach(node)
        return node, GROUND_TRUTH
    return outputs[dep].value, PREDICTED


def execute(
    plan: ExecutablePlan,
    policy: Optional[GuidancePolicy] = None,
    gt: Optional[Sequence[Optional[StepTarget]]] = None,
    answer: Optional[str] = None,
) -> Trace:
    policy = policy if policy is not None else GuidancePolicy(0.0, "inference")
    if policy.epsilon > 0 and gt is None:
        raise GroundTruthRequired("epsilon > 0 needs ground-truth step outputs")
    f = plan.features
    V = dc.constant(f.visual.astype(np.float64))
    texts: Dict[str, dc.Node] = {}
    outputs: List[ModuleOutput] = []
    records: List[StepRecord] = []
    program_coin = policy.rng.random() if policy.granularity == "program" else None
    for step in plan.program.steps:
        deps, prov = [], []
        for d in step.deps:
            node, src = select_input(d, outputs, policy, gt, program_coin)
            deps.append(node)
            prov.append(src)
        t = None
        if step.arg is not None and step.opcode.takes_text_arg:
            if step.arg not in texts:
                texts[step.arg] = dc.constant(f.text_args[step.arg].astype(np.float64))
            t = texts[step.arg]
        out = plan.modules(step.op, ModuleIO(V, t, deps, step.arg))
        if not np.all(np.isfinite(out.value.value)):
            raise NumericError(step.index, f"{step.op} produced non-finite values")
        outputs.append(out)
        records.append(
            StepRecord(step.index, step.op, step.arg, step.deps, out.kind, prov, out, gt[step.index] if gt is not None else None)
        )

    vocab = plan.answer_vocab
    last = outputs[-1]
    if last.kind == BOOLEAN:
        b = float(last.value.value.item())
        dist = np.zeros((len(vocab), 1))
        dist[vocab.index(YES)] = b
        dist[vocab.index(NO)] = 1.0 - b
        predicted = YES if b >= 0.5 else NO
    else:
        dist = last.value.value.copy()
        predicted = vocab[int(np.argmax(dist[:, 0]))]
    return Trace(plan.program.id, records, vocab, dist, predicted, answer)
