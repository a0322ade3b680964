"""Neural module library: one small differentiable formula per opcode.

Shapes: ``t`` is the ``d x 1`` text-argument embedding, ``V`` the ``d x n``
box features, ``a`` an ``n x 1`` attention simplex and ``b`` a ``1 x 1``
probability.  Parameters live in a :class:`~nmn.diffcore.ParameterStore`
under ``"<opcode>.<Wk>"`` and are shared by every instance of an opcode.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .program import ANSWER, ATTENTION, BOOLEAN, CATALOG, split_choices


class ModuleInputError(ValueError):
    pass


@dataclass
class ModuleIO:
    V: dc.Node
    t: Optional[dc.Node] = None
    deps: List[dc.Node] = field(default_factory=list)
    arg: Optional[str] = None


@dataclass
class ModuleOutput:
    kind: str
    value: dc.Node
    logits: Optional[dc.Node] = None  # None for the parameter-free boolean ops
    mask: Optional[np.ndarray] = None  # answer candidates for Choose*


def param_shapes(op: str, d: int, n: int, n_answers: int) -> Dict[str, tuple]:
    if op == "Select":
        return {"W1": (d, d), "W2": (d, d), "W3": (1, 1), "b": (1, 1)}
    if op in ("RelateSub", "RelateObj"):
        return {"W1": (d, d), "W2": (d, d), "W3": (1, 1), "W4": (d, d), "W5": (d, d), "W6": (1, 1), "W7": (1, 1), "b": (1, 1)}
    if op in ("FilterAttr", "FilterName"):
        return {"W1": (d, d), "W2": (d, d), "W3": (1, 1), "W6": (1, 1), "b": (1, 1)}
    if op == "VerifyAttr":
        return {"W1": (d, d), "W2": (d, d), "W3": (1, d)}
    if op == "VerifyRel":
        return {"W1": (d, d), "W2": (d, d), "W3": (1, d), "W4": (d, d)}
    if op == "Exist":
        return {"W1": (n, n), "W2": (1, n), "c": (1, 1)}
    if op == "QueryName":
        return {"W1": (d, d), "W2": (n_answers, d)}
    if op in ("QueryAttr", "ChooseAttr", "ChooseName"):
        return {"W1": (d, d), "W2": (d, d), "W3": (n_answers, d)}
    if op in ("And", "Or"):
        return {}
    raise KeyError(op)


GAIN_SLOTS = {
    "Select": ("W3",),
    "RelateSub": ("W3", "W6"),
    "RelateObj": ("W3", "W6"),
    "FilterAttr": ("W3", "W6"),
    "FilterName": ("W3", "W6"),
}


def _init_kind(op: str, slot: str) -> str:
    # scalar gains start at +1: the gated products they scale are
    # non-negative, so a negative start inverts the module's ranking
    if slot in ("c", "b", "W7"):
        return "zeros"
    if slot in GAIN_SLOTS.get(op, ()):
        return "ones"
    return "uniform"


class NeuralModules:
    """Binds the opcode formulas to a parameter store of fixed dimensions."""

    def __init__(self, store: dc.ParameterStore, d: int, n_boxes: int, answer_vocab: Sequence[str]):
        self.store = store
        self.d = d
        self.n_boxes = n_boxes
        self.answer_vocab = list(answer_vocab)
        self.answer_index = {a: i for i, a in enumerate(self.answer_vocab)}

    def init_params(self, ops: Optional[Sequence[str]] = None) -> None:
        for op in ops or CATALOG:
            for slot, shape in param_shapes(op, self.d, self.n_boxes, len(self.answer_vocab)).items():
                name = f"{op}.{slot}"
                if name not in self.store:
                    self.store.create(name, shape, init=_init_kind(op, slot))

    def check_dims(self) -> None:
        """Raise if the store was built for different ``d``/``n``/vocab sizes."""
        for op in CATALOG:
            for slot, shape in param_shapes(op, self.d, self.n_boxes, len(self.answer_vocab)).items():
                name = f"{op}.{slot}"
                if name in self.store and self.store.values[name].shape != shape:
                    got = self.store.values[name].shape
                    raise dc.ShapeError(f"{name}: checkpoint shape {got} does not match expected {shape}")

    def zero_params(self) -> None:
        for arr in self.store.values.values():
            arr[...] = 0.0

    def slots(self, op: str) -> List[str]:
        return [f"{op}.{s}" for s in param_shapes(op, self.d, self.n_boxes, len(self.answer_vocab))]

    def __call__(self, op: str, io: ModuleIO) -> ModuleOutput:
        spec = CATALOG[op]
        if spec.takes_text_arg and io.t is None:
            raise ModuleInputError(f"{op}: missing text argument")
        if len(io.deps) != spec.arity:
            raise ModuleInputError(f"{op}: expected {spec.arity} dependencies, got {len(io.deps)}")
        P = lambda slot: self.store.node(f"{op}.{slot}")
        return _FORMULAS[op](self, P, io)

    def candidate_mask(self, arg: Optional[str]) -> np.ndarray:
        choices = split_choices(arg or "")
        if len(choices) < 2:
            raise ModuleInputError(f"choose needs at least two candidates, got {arg!r}")
        mask = np.zeros((len(self.answer_vocab), 1), dtype=bool)
        for c in choices:
            if c not in self.answer_index:
                raise ModuleInputError(f"candidate {c!r} is not in the answer vocabulary")
            mask[self.answer_index[c]] = True
        return mask


# ---------------------------------------------------------------------------
# formulas

M = dc.matmul
r = dc.relu


def _offset(lib, P, logits):
    # softmax ignores a common shift, so the offset leaves the attention
    # untouched; it gives the per-box soft-matching loss a decision threshold,
    # which the non-negative gated products cannot provide on their own
    return dc.add(logits, M(dc.constant(np.ones((lib.n_boxes, 1))), P("b")))


def _select(lib, P, io):
    x = r(M(P("W1"), io.t))
    Y = r(M(P("W2"), io.V))
    logits = _offset(lib, P, M(M(dc.transpose(Y), x), P("W3")))
    return ModuleOutput(ATTENTION, dc.softmax(logits), logits)


def _relate(lib, P, io):
    # x ⊙ y ⊙ z template.  The attended summary y is gated by the text
    # embedding and scored against every box, so the relation type can steer
    # which pairwise comparison is made.  The last term sees the source boxes
    # themselves; every relation is irreflexive, so it learns to exclude them.
    (a,) = io.deps
    x = r(M(P("W1"), io.t))
    Y = r(M(P("W2"), io.V))
    Yt = dc.transpose(Y)
    xt = M(Yt, x)
    z = dc.softmax(M(xt, P("W3")))
    y = r(M(P("W4"), M(io.V, a)))
    yt = M(Yt, M(P("W5"), dc.hadamard(x, y)))
    logits = dc.add(
        M(dc.hadamard(dc.hadamard(xt, yt), z), P("W6")),
        M(dc.scale(a, lib.n_boxes), P("W7")),
    )
    logits = _offset(lib, P, logits)
    return ModuleOutput(ATTENTION, dc.softmax(logits), logits)


def _filter(lib, P, io):
    # same template, but the per-box factor is the incoming attention itself:
    # a filter keeps a subset of its input, which a feature summary of the
    # input cannot express when the input was picked by position
    (a,) = io.deps
    x = r(M(P("W1"), io.t))
    Y = r(M(P("W2"), io.V))
    xt = M(dc.transpose(Y), x)
    z = dc.softmax(M(xt, P("W3")))
    logits = _offset(lib, P, M(dc.hadamard(dc.hadamard(xt, dc.scale(a, lib.n_boxes)), z), P("W6")))
    return ModuleOutput(ATTENTION, dc.softmax(logits), logits)


def _verify_attr(lib, P, io):
    (a,) = io.deps
    x = r(M(P("W1"), io.t))
    y = r(M(P("W2"), M(io.V, a)))
    logits = M(P("W3"), dc.hadamard(x, y))
    return ModuleOutput(BOOLEAN, dc.sigmoid(logits), logits)


def _verify_rel(lib, P, io):
    a1, a2 = io.deps
    x = r(M(P("W1"), io.t))
    y1 = r(M(P("W2"), M(io.V, a1)))
    y2 = r(M(P("W4"), M(io.V, a2)))
    logits = M(P("W3"), dc.hadamard(dc.hadamard(x, y1), y2))
    return ModuleOutput(BOOLEAN, dc.sigmoid(logits), logits)


def _and(lib, P, io):
    b1, b2 = io.deps
    return ModuleOutput(BOOLEAN, dc.hadamard(b1, b2))


def _or(lib, P, io):
    b1, b2 = io.deps
    # b1 + b2 - b1*b2, written as 1 - (1-b1)(1-b2)
    nb = dc.hadamard(dc.scale(b1, -1.0, 1.0), dc.scale(b2, -1.0, 1.0))
    return ModuleOutput(BOOLEAN, dc.scale(nb, -1.0, 1.0))


def _exist(lib, P, io):
    (a,) = io.deps
    order = np.argsort(-a.value[:, 0], kind="stable")
    sorted_a = dc.take(a, order)
    h = r(M(P("W1"), sorted_a))
    logits = dc.add(M(P("W2"), h), P("c"))
    return ModuleOutput(BOOLEAN, dc.sigmoid(logits), logits)


def _query_name(lib, P, io):
    (a,) = io.deps
    y = r(M(P("W1"), M(io.V, a)))
    logits = M(P("W2"), y)
    return ModuleOutput(ANSWER, dc.softmax(logits), logits)


def _query_attr(lib, P, io, mask=None):
    (a,) = io.deps
    x = r(M(P("W1"), io.t))
    y = r(M(P("W2"), M(io.V, a)))
    logits = M(P("W3"), dc.hadamard(x, y))
    return ModuleOutput(ANSWER, dc.softmax(logits, mask), logits, mask)


def _choose(lib, P, io):
    return _query_attr(lib, P, io, mask=lib.candidate_mask(io.arg))


_FORMULAS: Dict[str, Callable] = {
    "Select": _select,
    "RelateSub": _relate,
    "RelateObj": _relate,
    "FilterAttr": _filter,
    "FilterName": _filter,
    "VerifyAttr": _verify_attr,
    "VerifyRel": _verify_rel,
    "And": _and,
    "Or": _or,
    "Exist": _exist,
    "QueryName": _query_name,
    "QueryAttr": _query_attr,
    "ChooseAttr": _choose,
    "ChooseName": _choose,
}
