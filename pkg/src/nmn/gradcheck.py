"""Finite-difference verification of every module and of a guided 3-step program.

Runs at toy dimensions so the full sweep finishes in seconds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import diffcore as dc
from .executor import GuidancePolicy, execute, instantiate
from .guidance import AttentionTarget, LossWeights, MatchConfig, StepTarget, multitask_loss
from .modules import ModuleIO, NeuralModules
from .program import ANSWER, ATTENTION, BOOLEAN, CATALOG, Program, ProgramStep
from .synthdata import NO, YES, FeatureSet

D, N = 8, 4
VOCAB = [YES, NO, "cat", "dog", "red", "blue"]
TEXT = ("red", "dog", "left of", "blue")
SEED = 1  # every check at this seed has live (nonzero) gradients


@dataclass
class CheckLine:
    name: str
    max_rel_error: float
    n_checked: int
    worst: Optional[str]
    tol: float
    n_nonzero: int = 1  # a check where every gradient vanishes proves nothing
    n_skipped: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol and self.n_nonzero > 0

    def __str__(self):
        status = "ok  " if self.ok else "FAIL"
        return f"{status} {self.name:<34} max_rel_err={self.max_rel_error:.3e} n={self.n_checked} nonzero={self.n_nonzero}" + (
            f" skipped={self.n_skipped}" if self.n_skipped else ""
        )


@dataclass
class GradCheckSummary:
    lines: List[CheckLine] = field(default_factory=list)
    cut_ok: bool = True
    cut_leak: float = 0.0

    @property
    def ok(self) -> bool:
        return self.cut_ok and all(l.ok for l in self.lines)

    def render(self) -> str:
        out = [str(l) for l in self.lines]
        status = "ok  " if self.cut_ok else "FAIL"
        out.append(f"{status} {'gradient cut (all inputs gt)':<34} max|upstream grad|={self.cut_leak:.3e}")
        out.append("PASS" if self.ok else "FAIL")
        return "\n".join(out)


def _nonzero_grads(loss, store) -> int:
    store.zero_grad()
    dc.backward(loss)
    n = sum(int(np.count_nonzero(g)) for g in store.grads.values())
    store.zero_grad()
    return n


def toy_features(rng: np.random.Generator, dtype=np.float64) -> FeatureSet:
    boxes = np.array([[0.1, 0.1, 0.3, 0.3], [0.5, 0.2, 0.7, 0.5], [0.2, 0.6, 0.4, 0.9], [0.6, 0.6, 0.9, 0.8]], dtype=np.float32)
    visual = rng.normal(size=(D, N)).astype(np.float32)
    text = {t: rng.normal(size=D).astype(np.float32) for t in TEXT}
    text["red|blue"] = rng.normal(size=D).astype(np.float32)
    text["cat|dog"] = rng.normal(size=D).astype(np.float32)
    return FeatureSet(boxes, visual, text, VOCAB)


def _losses(kind: str, out, rng, n_ans: int):
    """Every loss that can sit on an output of this kind."""
    if kind == ATTENTION:
        hot = np.zeros((N, 1))
        hot[[0, 2]] = 1.0
        return [("attention-ce", dc.cross_entropy(out.logits, hot / hot.sum())), ("attention-bce", dc.bce_logits(out.logits, hot))]
    if kind == BOOLEAN:
        if out.logits is not None:
            return [("boolean-bce", dc.bce_logits(out.logits, np.ones((1, 1))))]
        return [("boolean-bce", dc.bce(out.value, np.ones((1, 1))))]
    target = np.zeros((n_ans, 1))
    idx = np.flatnonzero(out.mask[:, 0])[0] if out.mask is not None else 2
    target[idx] = 1.0
    return [("answer-ce", dc.cross_entropy(out.logits, target, out.mask))]


def check_modules(h: float, tol: float, dtype=np.float64, seed: int = SEED, floor: float = 1e-4, skip_nonsmooth: bool = False) -> List[CheckLine]:
    rng = np.random.default_rng(seed)
    fs = toy_features(rng)
    V = dc.constant(fs.visual, dtype)
    T = {k: dc.constant(v, dtype) for k, v in fs.text_args.items()}
    lines = []
    for op, spec in CATALOG.items():
        store = dc.ParameterStore(seed=seed, dtype=dtype)
        lib = NeuralModules(store, D, N, VOCAB)
        lib.init_params()
        # give the zero-initialised bias something to do
        for name in store.values:
            if name.endswith(".c"):
                store.values[name][...] = 0.3
        # upstream modules make every input differentiable
        sel = lambda t: lib("Select", ModuleIO(V, T[t])).value
        deps = []
        for j, k in enumerate(spec.input_kinds):
            att = sel(TEXT[j])
            deps.append(att if k == ATTENTION else lib("VerifyAttr", ModuleIO(V, T[TEXT[j + 2]], [att])).value)
        arg = None
        if spec.takes_text_arg:
            arg = {"ChooseAttr": "red|blue", "ChooseName": "cat|dog"}.get(op, "left of")
        out = lib(op, ModuleIO(V, T[arg] if arg else None, deps, arg))
        for lname, loss in _losses(spec.output_kind, out, rng, len(VOCAB)):
            rep = dc.check_gradients(loss, store, h=h, floor=floor, skip_nonsmooth=skip_nonsmooth)
            nz = _nonzero_grads(loss, store)
            lines.append(CheckLine(f"{op} / {lname}", rep.max_rel_error, rep.n_checked, rep.worst, tol, nz, rep.n_skipped))
    return lines


class _Coins:
    """Replays a fixed sequence of coin values in place of an rng."""

    def __init__(self, values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


def three_step(dtype=np.float64, seed: int = SEED):
    rng = np.random.default_rng(seed)
    fs = toy_features(rng)
    store = dc.ParameterStore(seed=seed, dtype=dtype)
    lib = NeuralModules(store, D, N, VOCAB)
    lib.init_params()
    prog = Program(
        "gradcheck",
        [ProgramStep(0, "Select", (), "red"), ProgramStep(1, "RelateSub", (0,), "left of"), ProgramStep(2, "QueryName", (1,), None)],
    )
    gt = [
        StepTarget(ATTENTION, attention=AttentionTarget("soft", N, (1,))),
        StepTarget(ATTENTION, attention=AttentionTarget("soft", N, (0, 3))),
        StepTarget(ANSWER, answer="dog"),
    ]
    return instantiate(prog, fs, lib), gt, store


def check_program(h: float, tol: float, detach: bool = True, dtype=np.float64, floor: float = 1e-4, skip_nonsmooth: bool = False) -> CheckLine:
    """Mixed provenance: edge 0->1 takes ground truth, edge 1->2 the prediction."""
    plan, gt, store = three_step(dtype)
    tr = execute(plan, GuidancePolicy(0.5, "train", _Coins([0.0, 0.99]), detach=detach), gt, "dog")
    assert tr.provenances() == ["ground_truth", "predicted"]
    lb = multitask_loss([tr], LossWeights(), MatchConfig("soft"))
    rep = dc.check_gradients(lb.L, store, h=h, floor=floor, skip_nonsmooth=skip_nonsmooth)
    nz = _nonzero_grads(lb.L, store)
    return CheckLine("3-step program / mixed provenance", rep.max_rel_error, rep.n_checked, rep.worst, tol, nz, rep.n_skipped)


def check_cut(detach: bool = True, dtype=np.float64) -> float:
    """Largest upstream gradient when every edge is substituted and only the answer is scored."""
    plan, gt, store = three_step(dtype)
    tr = execute(plan, GuidancePolicy(1.0, "train", np.random.default_rng(0), detach=detach), gt, "dog")
    lb = multitask_loss([tr], LossWeights(0.0, 0.0, 1.0), MatchConfig("soft"))
    store.zero_grad()
    dc.backward(lb.L)
    leak = 0.0
    for name, g in store.grads.items():
        if name.split(".")[0] in ("Select", "RelateSub"):
            leak = max(leak, float(np.max(np.abs(g))))
    store.zero_grad()
    return leak


def run(float32: bool = False, detach: bool = True) -> GradCheckSummary:
    dtype = np.float32 if float32 else np.float64
    # single precision: larger step and floor, since rounding in the loss is ~1e-7
    tol, h, floor = (1e-2, 3e-3, 1e-2) if float32 else (1e-4, 1e-6, 1e-4)
    summary = GradCheckSummary()
    summary.lines = check_modules(h, tol, dtype, floor=floor, skip_nonsmooth=float32)
    summary.lines.append(check_program(h, tol, detach, dtype, floor=floor, skip_nonsmooth=float32))
    summary.cut_leak = check_cut(detach, dtype)
    summary.cut_ok = summary.cut_leak == 0.0
    return summary
