"""Synthetic scenes, template programs, an exact symbolic oracle and feature files.

Scenes are small symbolic worlds (named objects with a color and a material,
placed in the unit square among distractor boxes).  The oracle evaluates a
program with set semantics and supplies every intermediate ground truth.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .modules import ModuleOutput
from .program import ANSWER, ATTENTION, BOOLEAN, CATALOG, Program, ProgramStep, split_choices, validate_program

YES, NO = "yes", "no"


class DataError(ValueError):
    pass


class NoSatisfiableTemplate(DataError):
    pass


class OracleError(DataError):
    pass


@dataclass(frozen=True)
class Vocab:
    names: Tuple[str, ...] = (
        "cat", "dog", "laptop", "sofa", "table", "chair", "cup", "book", "lamp", "car",
        "bike", "tree", "person", "horse", "bird", "bottle", "phone", "bag", "clock", "plant",
    )
    categories: Tuple[Tuple[str, Tuple[str, ...]], ...] = (
        ("color", ("red", "blue", "green", "white", "black")),
        ("material", ("wood", "metal", "plastic", "glass", "fabric")),
    )
    spatial: Tuple[str, ...] = ("left of", "right of", "above", "below")
    symbolic: Tuple[str, ...] = ("same color", "same material")

    @property
    def attributes(self) -> Tuple[str, ...]:
        return tuple(a for _, vals in self.categories for a in vals)

    @property
    def relations(self) -> Tuple[str, ...]:
        return self.spatial + self.symbolic

    @property
    def answers(self) -> List[str]:
        return [YES, NO, *self.names, *self.attributes]

    def category_of(self, attr: str) -> str:
        for cat, vals in self.categories:
            if attr in vals:
                return cat
        raise DataError(f"unknown attribute {attr!r}")

    def values_of(self, category: str) -> Tuple[str, ...]:
        return dict(self.categories)[category]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "categories": [[c, list(v)] for c, v in self.categories],
            "spatial": list(self.spatial),
            "symbolic": list(self.symbolic),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(
            tuple(d["names"]),
            tuple((c, tuple(v)) for c, v in d["categories"]),
            tuple(d["spatial"]),
            tuple(d["symbolic"]),
        )


@dataclass
class SceneObject:
    name: str
    attributes: Tuple[str, ...]
    box: Tuple[float, float, float, float]
    slot: int  # index of this object's detector box

    def to_dict(self):
        return {"name": self.name, "attributes": list(self.attributes), "box": list(self.box), "slot": self.slot}


@dataclass
class Scene:
    id: str
    objects: List[SceneObject]
    boxes: List[Tuple[float, float, float, float]]  # detector boxes, n_boxes of them
    relations: List[Tuple[int, str, int]] = field(default_factory=list)  # object indices

    @property
    def n_boxes(self) -> int:
        return len(self.boxes)

    def slot_to_object(self) -> Dict[int, int]:
        return {o.slot: i for i, o in enumerate(self.objects)}

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "objects": [o.to_dict() for o in self.objects],
            "boxes": [list(b) for b in self.boxes],
            "relations": [list(r) for r in self.relations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        objs = [SceneObject(o["name"], tuple(o["attributes"]), tuple(o["box"]), o["slot"]) for o in d["objects"]]
        return cls(d["id"], objs, [tuple(b) for b in d["boxes"]], [tuple(r) for r in d["relations"]])


def _center(box):
    return (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0


def spatial_relations(objects: Sequence[SceneObject]) -> List[Tuple[int, str, int]]:
    rels = []
    for i, a in enumerate(objects):
        ax, ay = _center(a.box)
        for j, b in enumerate(objects):
            if i == j:
                continue
            bx, by = _center(b.box)
            if ax < bx:
                rels.append((i, "left of", j))
            if ax > bx:
                rels.append((i, "right of", j))
            if ay < by:  # image coordinates: y grows downwards
                rels.append((i, "above", j))
            if ay > by:
                rels.append((i, "below", j))
    return rels


def symbolic_relations(objects: Sequence[SceneObject], vocab: Vocab) -> List[Tuple[int, str, int]]:
    rels = []
    for i, a in enumerate(objects):
        for j, b in enumerate(objects):
            if i == j:
                continue
            for cat, pred in zip(("color", "material"), vocab.symbolic):
                va = [x for x in a.attributes if vocab.category_of(x) == cat]
                vb = [x for x in b.attributes if vocab.category_of(x) == cat]
                if va and va == vb:
                    rels.append((i, pred, j))
    return rels


def _random_box(rng, lo=0.08, hi=0.2):
    w, h = rng.uniform(lo, hi, size=2)
    x1 = rng.uniform(0, 1 - w)
    y1 = rng.uniform(0, 1 - h)
    return (float(x1), float(y1), float(x1 + w), float(y1 + h))


def generate_scene(
    rng: np.random.Generator,
    vocab: Vocab,
    n_objects: int,
    n_boxes: int,
    unique_names: bool = False,
    min_gap: float = 0.04,
    scene_id: str = "",
) -> Scene:
    """Sample objects and distractor boxes; relations follow from the geometry."""
    if n_objects > n_boxes:
        raise DataError(f"n_objects={n_objects} exceeds n_boxes={n_boxes}")
    if unique_names and n_objects > len(vocab.names):
        raise DataError("vocabulary too small for unique object names")
    centers: List[Tuple[float, float]] = []
    obj_boxes = []
    for _ in range(n_objects):
        for _attempt in range(200):
            box = _random_box(rng)
            cx, cy = _center(box)
            if all(abs(cx - ox) > min_gap and abs(cy - oy) > min_gap for ox, oy in centers):
                break
        centers.append((cx, cy))
        obj_boxes.append(box)
    slots = rng.permutation(n_boxes)
    if unique_names:
        names = [vocab.names[i] for i in rng.choice(len(vocab.names), size=n_objects, replace=False)]
    else:
        names = [vocab.names[i] for i in rng.integers(len(vocab.names), size=n_objects)]
    objects = []
    for k in range(n_objects):
        attrs = tuple(vals[int(rng.integers(len(vals)))] for _, vals in vocab.categories)
        objects.append(SceneObject(names[k], attrs, obj_boxes[k], int(slots[k])))
    boxes: List[Optional[tuple]] = [None] * n_boxes
    for o in objects:
        boxes[o.slot] = o.box
    for s in range(n_boxes):
        if boxes[s] is None:
            boxes[s] = _random_box(rng, 0.05, 0.3)
    scene = Scene(scene_id, objects, boxes)
    scene.relations = spatial_relations(objects) + symbolic_relations(objects, vocab)
    return scene


# ---------------------------------------------------------------------------
# oracle


@dataclass
class OracleTruth:
    """Per-step symbolic outputs: sorted box-slot tuples, bools, or answer strings."""

    steps: List[object]
    answer: str

    def to_dict(self) -> dict:
        out = []
        for v in self.steps:
            if isinstance(v, bool):
                out.append({"kind": BOOLEAN, "value": v})
            elif isinstance(v, str):
                out.append({"kind": ANSWER, "value": v})
            else:
                out.append({"kind": ATTENTION, "value": list(v)})
        return {"steps": out, "answer": self.answer}

    @classmethod
    def from_dict(cls, d: dict) -> "OracleTruth":
        steps = []
        for s in d["steps"]:
            steps.append(tuple(s["value"]) if s["kind"] == ATTENTION else s["value"])
        return cls(steps, d["answer"])


class SymbolicOps:
    """Set-semantics evaluation of every opcode on one scene (works on box slots)."""

    def __init__(self, scene: Scene, vocab: Vocab = Vocab()):
        self.scene = scene
        self.vocab = vocab
        self.obj_of = scene.slot_to_object()
        self.rel = {}
        for s, p, o in scene.relations:
            self.rel.setdefault(p, set()).add((s, o))

    def _objs(self, slots):
        return [self.obj_of[s] for s in slots if s in self.obj_of]

    def _slots(self, objs):
        return tuple(sorted(self.scene.objects[i].slot for i in objs))

    def _unique(self, slots, op):
        objs = self._objs(slots)
        if len(objs) != 1:
            raise OracleError(f"{op}: expected a unique object, got {len(objs)}")
        return self.scene.objects[objs[0]]

    def run(self, op: str, arg: Optional[str], inputs: List[object]):
        objs = self.scene.objects
        if op == "Select":
            return self._slots(i for i, o in enumerate(objs) if o.name == arg)
        if op == "FilterAttr":
            return self._slots(i for i in self._objs(inputs[0]) if arg in objs[i].attributes)
        if op == "FilterName":
            return self._slots(i for i in self._objs(inputs[0]) if objs[i].name == arg)
        if op in ("RelateSub", "RelateObj"):
            src = set(self._objs(inputs[0]))
            pairs = self.rel.get(arg, set())
            if op == "RelateSub":
                hit = {s for s, o in pairs if o in src}
            else:
                hit = {o for s, o in pairs if s in src}
            return self._slots(hit)
        if op == "Exist":
            return len(self._objs(inputs[0])) > 0
        if op == "And":
            return bool(inputs[0] and inputs[1])
        if op == "Or":
            return bool(inputs[0] or inputs[1])
        if op == "VerifyAttr":
            return any(arg in objs[i].attributes for i in self._objs(inputs[0]))
        if op == "VerifyRel":
            pairs = self.rel.get(arg, set())
            return any((s, o) in pairs for s in self._objs(inputs[0]) for o in self._objs(inputs[1]))
        if op == "QueryName":
            return self._unique(inputs[0], op).name
        if op == "QueryAttr":
            obj = self._unique(inputs[0], op)
            vals = [a for a in obj.attributes if self.vocab.category_of(a) == arg]
            if len(vals) != 1:
                raise OracleError(f"QueryAttr: object has no single {arg!r} value")
            return vals[0]
        if op in ("ChooseAttr", "ChooseName"):
            obj = self._unique(inputs[0], op)
            have = set(obj.attributes) if op == "ChooseAttr" else {obj.name}
            hits = [c for c in split_choices(arg) if c in have]
            if len(hits) != 1:
                raise OracleError(f"{op}: {len(hits)} candidates of {arg!r} hold")
            return hits[0]
        raise OracleError(f"no symbolic semantics for {op}")


def oracle_execute(p: Program, s: Scene, vocab: Vocab = Vocab()) -> OracleTruth:
    ops = SymbolicOps(s, vocab)
    outs: List[object] = []
    for step in p.steps:
        outs.append(ops.run(step.op, step.arg, [outs[d] for d in step.deps]))
    last = outs[-1]
    if isinstance(last, bool):
        answer = YES if last else NO
    elif isinstance(last, str):
        answer = last
    else:
        raise OracleError("program does not end in an answer or boolean")
    return OracleTruth(outs, answer)


class OracleModules:
    """Drop-in replacement for the neural modules that computes exact outputs.

    Attention inputs are decoded by their support; the uniform vector over
    every box is the encoding of the empty set.
    """

    def __init__(self, scene: Scene, answer_vocab: Sequence[str], vocab: Vocab = Vocab()):
        self.ops = SymbolicOps(scene, vocab)
        self.n = scene.n_boxes
        self.answer_vocab = list(answer_vocab)
        self.has_distractors = len(scene.objects) < scene.n_boxes

    def decode(self, kind: str, value: np.ndarray):
        if kind == BOOLEAN:
            return bool(value.item() > 0.5)
        v = value[:, 0]
        support = tuple(int(i) for i in np.flatnonzero(v > 1e-9))
        if self.has_distractors and len(support) == self.n:
            return ()
        return support

    def encode(self, kind: str, sym) -> np.ndarray:
        if kind == ATTENTION:
            return attention_value(sym, self.n)
        if kind == BOOLEAN:
            return np.full((1, 1), 1.0 if sym else 0.0)
        out = np.zeros((len(self.answer_vocab), 1))
        out[self.answer_vocab.index(sym)] = 1.0
        return out

    def __call__(self, op: str, io) -> ModuleOutput:
        spec = CATALOG[op]
        inputs = [self.decode(k, d.value) for k, d in zip(spec.input_kinds, io.deps)]
        sym = self.ops.run(op, io.arg, inputs)
        return ModuleOutput(spec.output_kind, dc.constant(self.encode(spec.output_kind, sym)))


def attention_value(slots: Sequence[int], n: int) -> np.ndarray:
    """Uniform distribution over ``slots``; uniform over all boxes when empty."""
    out = np.zeros((n, 1))
    if len(slots) == 0:
        out[:] = 1.0 / n
    else:
        out[list(slots)] = 1.0 / len(slots)
    return out


# ---------------------------------------------------------------------------
# templates


def _step(i, op, deps=(), arg=None):
    return ProgramStep(i, op, tuple(deps), arg)


class Templates:
    """Program templates over a scene.  Each returns a Program or None when unsatisfiable."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self.names = {
            "query_name": self.query_name,
            "query_attr": self.query_attr,
            "verify_attr": self.verify_attr,
            "choose_attr": self.choose_attr,
            "exist_filter": self.exist_filter,
            "relate_query": self.relate_query,
            "relate_choose": self.relate_choose,
            "relate_filter_query": self.relate_filter_query,
            "long_exist": self.long_exist,
            "logic": self.logic,
            "verify_rel": self.verify_rel,
        }

    # helpers
    def _unique_names(self, scene):
        counts: Dict[str, int] = {}
        for o in scene.objects:
            counts[o.name] = counts.get(o.name, 0) + 1
        return sorted(n for n, c in counts.items() if c == 1)

    def _object_named(self, scene, name):
        return next(o for o in scene.objects if o.name == name)

    def _pick(self, rng, seq):
        seq = list(seq)
        return seq[int(rng.integers(len(seq)))] if seq else None

    def _relate_targets(self, scene, ops, src_slots, op):
        out = {}
        for r in self.vocab.relations:
            out[r] = ops.run(op, r, [src_slots])
        return out

    # templates
    def query_name(self, rng, scene, ops):
        n = self._pick(rng, self._unique_names(scene))
        if n is None:
            return None
        return [_step(0, "Select", (), n), _step(1, "QueryName", (0,))], f"What is the {n}?"

    def query_attr(self, rng, scene, ops):
        n = self._pick(rng, self._unique_names(scene))
        if n is None:
            return None
        cat = self._pick(rng, [c for c, _ in self.vocab.categories])
        return [_step(0, "Select", (), n), _step(1, "QueryAttr", (0,), cat)], f"What {cat} is the {n}?"

    def verify_attr(self, rng, scene, ops):
        n = self._pick(rng, self._unique_names(scene))
        if n is None:
            return None
        obj = self._object_named(scene, n)
        want = bool(rng.integers(2))
        pool = obj.attributes if want else [a for a in self.vocab.attributes if a not in obj.attributes]
        a = self._pick(rng, pool)
        return [_step(0, "Select", (), n), _step(1, "VerifyAttr", (0,), a)], f"Is the {n} {a}?"

    def choose_attr(self, rng, scene, ops):
        n = self._pick(rng, self._unique_names(scene))
        if n is None:
            return None
        obj = self._object_named(scene, n)
        cat = self._pick(rng, [c for c, _ in self.vocab.categories])
        right = next(a for a in obj.attributes if self.vocab.category_of(a) == cat)
        wrong = self._pick(rng, [a for a in self.vocab.values_of(cat) if a != right])
        opts = [right, wrong] if rng.integers(2) else [wrong, right]
        arg = "|".join(opts)
        return [_step(0, "Select", (), n), _step(1, "ChooseAttr", (0,), arg)], f"Is the {n} {opts[0]} or {opts[1]}?"

    def exist_filter(self, rng, scene, ops):
        names = sorted({o.name for o in scene.objects})
        n = self._pick(rng, names)
        if n is None:
            return None
        have = {a for o in scene.objects if o.name == n for a in o.attributes}
        want = bool(rng.integers(2))
        a = self._pick(rng, sorted(have) if want else [x for x in self.vocab.attributes if x not in have])
        steps = [_step(0, "Select", (), n), _step(1, "FilterAttr", (0,), a), _step(2, "Exist", (1,))]
        return steps, f"Is there a {a} {n}?"

    def relate_query(self, rng, scene, ops):
        n = self._pick(rng, self._unique_names(scene))
        if n is None:
            return None
        src = ops.run("Select", n, [])
        op = "RelateSub"
        hits = self._relate_targets(scene, ops, src, op)
        rels = [r for r, s in hits.items() if len(s) == 1]
        r = self._pick(rng, rels)
        if r is None:
            return None
        steps = [_step(0, "Select", (), n), _step(1, op, (0,), r), _step(2, "QueryName", (1,))]
        return steps, f"What is the object {r} the {n}?"

    def relate_choose(self, rng, scene, ops):
        n = self._pick(rng, self._unique_names(scene))
        if n is None:
            return None
        src = ops.run("Select", n, [])
        hits = self._relate_targets(scene, ops, src, "RelateObj")
        rels = [r for r, s in hits.items() if len(s) == 1]
        r = self._pick(rng, rels)
        if r is None:
            return None
        target = self.vocab.names.index(scene.objects[ops.obj_of[hits[r][0]]].name)
        right = self.vocab.names[target]
        wrong = self._pick(rng, [x for x in self.vocab.names if x != right])
        opts = [right, wrong] if rng.integers(2) else [wrong, right]
        steps = [_step(0, "Select", (), n), _step(1, "RelateObj", (0,), r), _step(2, "ChooseName", (1,), "|".join(opts))]
        return steps, f"The {n} is {r} a {opts[0]} or a {opts[1]}?"

    def relate_filter_query(self, rng, scene, ops):
        n = self._pick(rng, self._unique_names(scene))
        if n is None:
            return None
        src = ops.run("Select", n, [])
        options = []
        for r, hit in self._relate_targets(scene, ops, src, "RelateSub").items():
            counts: Dict[str, int] = {}
            for s in hit:
                nm = scene.objects[ops.obj_of[s]].name
                counts[nm] = counts.get(nm, 0) + 1
            options += [(r, nm) for nm, c in counts.items() if c == 1]
        pick = self._pick(rng, sorted(options))
        if pick is None:
            return None
        r, n2 = pick
        cat = self._pick(rng, [c for c, _ in self.vocab.categories])
        steps = [
            _step(0, "Select", (), n),
            _step(1, "RelateSub", (0,), r),
            _step(2, "FilterName", (1,), n2),
            _step(3, "QueryAttr", (2,), cat),
        ]
        return steps, f"What {cat} is the {n2} {r} the {n}?"

    def long_exist(self, rng, scene, ops):
        obj = self._pick(rng, scene.objects)
        if obj is None:
            return None
        n = obj.name
        a = self._pick(rng, obj.attributes)
        src = ops.run("FilterAttr", a, [ops.run("Select", n, [])])
        r = self._pick(rng, self.vocab.relations)
        rel = ops.run("RelateSub", r, [src])
        present = sorted({scene.objects[ops.obj_of[s]].name for s in rel})
        want = bool(rng.integers(2))
        n2 = self._pick(rng, present if want else [x for x in self.vocab.names if x not in present])
        if n2 is None:
            return None
        steps = [
            _step(0, "Select", (), n),
            _step(1, "FilterAttr", (0,), a),
            _step(2, "RelateSub", (1,), r),
            _step(3, "FilterName", (2,), n2),
            _step(4, "Exist", (3,)),
        ]
        return steps, f"Is there a {n2} {r} the {a} {n}?"

    def logic(self, rng, scene, ops):
        present = sorted({o.name for o in scene.objects})
        absent = [x for x in self.vocab.names if x not in present]
        op = "And" if rng.integers(2) else "Or"
        want = bool(rng.integers(2))
        # pick the presence pattern that yields the wanted answer
        if op == "And":
            patterns = [(True, True)] if want else [(True, False), (False, True), (False, False)]
        else:
            patterns = [(True, True), (True, False), (False, True)] if want else [(False, False)]
        p1, p2 = patterns[int(rng.integers(len(patterns)))]
        n1 = self._pick(rng, present if p1 else absent)
        n2 = self._pick(rng, [x for x in (present if p2 else absent) if x != n1])
        if n1 is None or n2 is None:
            return None
        steps = [
            _step(0, "Select", (), n1),
            _step(1, "Exist", (0,)),
            _step(2, "Select", (), n2),
            _step(3, "Exist", (2,)),
            _step(4, op, (1, 3)),
        ]
        word = "and" if op == "And" else "or"
        return steps, f"Is there a {n1} {word} a {n2}?"

    def verify_rel(self, rng, scene, ops):
        names = self._unique_names(scene)
        if len(names) < 2:
            return None
        i, j = rng.choice(len(names), size=2, replace=False)
        n1, n2 = names[int(i)], names[int(j)]
        s1, s2 = ops.run("Select", n1, []), ops.run("Select", n2, [])
        truth = {r: ops.run("VerifyRel", r, [s1, s2]) for r in self.vocab.relations}
        want = bool(rng.integers(2))
        r = self._pick(rng, [r for r, v in truth.items() if v == want])
        if r is None:
            return None
        steps = [_step(0, "Select", (), n1), _step(1, "Select", (), n2), _step(2, "VerifyRel", (0, 1), r)]
        return steps, f"Is the {n1} {r} the {n2}?"


def generate_program(
    rng: np.random.Generator,
    scene: Scene,
    templates: Optional[Sequence[str]] = None,
    vocab: Vocab = Vocab(),
    program_id: str = "",
) -> Tuple[Program, OracleTruth, str]:
    """Instantiate a random satisfiable template; returns (program, truth, template name)."""
    lib = Templates(vocab)
    names = list(templates or lib.names)
    order = [names[i] for i in rng.permutation(len(names))]
    ops = SymbolicOps(scene, vocab)
    for name in order:
        built = lib.names[name](rng, scene, ops)
        if built is None:
            continue
        steps, question = built
        prog = Program(program_id, steps, question)
        diags = validate_program(prog)
        if diags:
            raise DataError(f"template {name} produced an invalid program: {diags[0]}")
        return prog, oracle_execute(prog, scene, vocab), name
    raise NoSatisfiableTemplate(f"no template in {names} is satisfiable for scene {scene.id!r}")


# ---------------------------------------------------------------------------
# features


@dataclass
class FeatureSynthConfig:
    d: int = 64
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be non-negative")


N_GEOMETRY = 6  # cx, cy, 1-cx, 1-cy, w, h


class ConceptSpace:
    """Indexes every concept (names, attributes, relations, categories) plus geometry slots."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        words = ["<null>", "<const>", *vocab.names, *vocab.attributes, *vocab.relations]
        words += [c for c, _ in vocab.categories]
        self.index = {w: i for i, w in enumerate(words)}
        self.n_words = len(words)
        self.size = self.n_words + N_GEOMETRY

    def word(self, w: str) -> np.ndarray:
        v = np.zeros(self.size)
        for part in split_choices(w) if "|" in w else [w]:
            if part not in self.index:
                raise DataError(f"unknown vocabulary item {part!r}")
            v[self.index[part]] += 1.0
        return v

    def box(self, box, concepts: Sequence[str]) -> np.ndarray:
        v = np.zeros(self.size)
        v[self.index["<const>"]] = 1.0
        for c in concepts or ["<null>"]:
            v[self.index[c]] = 1.0
        cx, cy = _center(box)
        v[self.n_words :] = [cx, cy, 1 - cx, 1 - cy, box[2] - box[0], box[3] - box[1]]
        return v


def make_projection(cfg: FeatureSynthConfig, size: int) -> np.ndarray:
    """Fixed map from concept space to R^d: orthonormal columns when d >= size."""
    rng = np.random.default_rng(cfg.seed)
    g = rng.standard_normal((cfg.d, size))
    if cfg.d >= size:
        q, rr = np.linalg.qr(g)
        return q * np.sign(np.diag(rr))
    return g / np.sqrt(cfg.d)


@dataclass
class FeatureSet:
    boxes: np.ndarray  # (n_boxes, 4) float32
    visual: np.ndarray  # (d, n_boxes) float32
    text_args: Dict[str, np.ndarray]  # arg -> (d,) float32
    answer_vocab: Optional[List[str]] = None

    @property
    def d(self) -> int:
        return self.visual.shape[0]

    @property
    def n_boxes(self) -> int:
        return self.visual.shape[1]

    def validate(self) -> None:
        if self.boxes.shape != (self.n_boxes, 4):
            raise DataError(f"boxes shape {self.boxes.shape} does not match n_boxes={self.n_boxes}")
        if np.any(self.boxes[:, 0] >= self.boxes[:, 2]) or np.any(self.boxes[:, 1] >= self.boxes[:, 3]):
            raise DataError("degenerate box (need x1<x2 and y1<y2)")
        for k, v in self.text_args.items():
            if v.shape != (self.d,):
                raise DataError(f"text arg {k!r} has shape {v.shape}, expected ({self.d},)")

    def equals(self, other: "FeatureSet") -> bool:
        return (
            np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.visual, other.visual)
            and self.text_args.keys() == other.text_args.keys()
            and all(np.array_equal(v, other.text_args[k]) for k, v in self.text_args.items())
        )


def encode_features(
    scene: Scene,
    args: Sequence[str],
    cfg: FeatureSynthConfig,
    projection: np.ndarray,
    vocab: Vocab = Vocab(),
    rng: Optional[np.random.Generator] = None,
) -> FeatureSet:
    space = ConceptSpace(vocab)
    if projection.shape != (cfg.d, space.size):
        raise DataError(f"projection shape {projection.shape} does not cover concept space {(cfg.d, space.size)}")
    by_slot = {o.slot: o for o in scene.objects}
    cols = []
    for s, box in enumerate(scene.boxes):
        o = by_slot.get(s)
        concepts = [o.name, *o.attributes] if o is not None else []
        cols.append(space.box(box, concepts))
    visual = projection @ np.stack(cols, axis=1)
    if cfg.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        visual = visual + rng.normal(0.0, cfg.noise_sigma, size=visual.shape)
    text = {a: (projection @ space.word(a)).astype(np.float32) for a in sorted(set(args))}
    return FeatureSet(
        np.asarray(scene.boxes, dtype=np.float32).reshape(-1, 4),
        visual.astype(np.float32),
        text,
        vocab.answers,
    )


# NMNF: magic, u32 version, u32 d, u32 n_boxes, boxes f32[n,4], visual f32 (column-major),
# u32 n_args, then per arg: u32 len + utf-8 bytes + f32[d]


def features_to_bytes(fs: FeatureSet) -> bytes:
    buf = io.BytesIO()
    buf.write(b"NMNF")
    buf.write(struct.pack("<III", 1, fs.d, fs.n_boxes))
    buf.write(np.ascontiguousarray(fs.boxes, dtype="<f4").tobytes())
    buf.write(np.asfortranarray(fs.visual, dtype="<f4").tobytes(order="F"))
    buf.write(struct.pack("<I", len(fs.text_args)))
    for name in sorted(fs.text_args):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(np.ascontiguousarray(fs.text_args[name], dtype="<f4").tobytes())
    return buf.getvalue()


def features_from_bytes(data: bytes, expect_d: Optional[int] = None, expect_n: Optional[int] = None) -> FeatureSet:
    if len(data) < 16:
        raise DataError("truncated feature file")
    if data[:4] != b"NMNF":
        raise DataError(f"bad magic {data[:4]!r}")
    version, d, n = struct.unpack_from("<III", data, 4)
    if version != 1:
        raise DataError(f"unsupported NMNF version {version}")
    if (expect_d is not None and d != expect_d) or (expect_n is not None and n != expect_n):
        raise DataError(f"dim mismatch: file has d={d}, n_boxes={n}; expected d={expect_d}, n_boxes={expect_n}")
    off = 16

    def read(count, dtype="<f4"):
        nonlocal off
        size = np.dtype(dtype).itemsize * count
        if off + size > len(data):
            raise DataError("truncated feature file")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += size
        return arr

    boxes = read(n * 4).reshape(n, 4).astype(np.float32)
    visual = read(d * n).reshape((d, n), order="F").astype(np.float32)
    (n_args,) = read(1, "<u4")
    args = {}
    for _ in range(int(n_args)):
        (ln,) = read(1, "<u4")
        name = bytes(read(int(ln), "u1")).decode("utf-8")
        args[name] = read(d).astype(np.float32)
    fs = FeatureSet(boxes, visual, args)
    fs.validate()
    return fs


def save_features(path, fs: FeatureSet) -> None:
    with open(path, "wb") as fh:
        fh.write(features_to_bytes(fs))


def load_features(path, expect_d: Optional[int] = None, expect_n: Optional[int] = None) -> FeatureSet:
    with open(path, "rb") as fh:
        return features_from_bytes(fh.read(), expect_d, expect_n)
