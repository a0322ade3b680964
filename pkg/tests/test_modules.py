from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmn import diffcore as dc
from nmn.modules import ModuleInputError, ModuleIO, NeuralModules, param_shapes
from nmn.program import CATALOG
from nmn.synthdata import NO, YES, ConceptSpace, SymbolicOps, Vocab, attention_value

D, N = 12, 6
VOCAB = [YES, NO, "cat", "dog", "red", "blue", "green"]


def make_lib(seed=0, zero=False):
    store = dc.ParameterStore(seed=seed)
    lib = NeuralModules(store, D, N, VOCAB)
    lib.init_params()
    if zero:
        lib.zero_params()
    return lib


@pytest.fixture
def inputs(rng):
    V = dc.constant(rng.normal(size=(D, N)))
    t = dc.constant(rng.normal(size=(D, 1)))
    a = np.zeros((N, 1))
    a[2] = 1.0
    return V, t, dc.constant(a)


def run(lib, op, V, t, deps, arg=None):
    return lib(op, ModuleIO(V, t if CATALOG[op].takes_text_arg else None, deps, arg))


def test_parameter_shapes_cover_catalog():
    for op in CATALOG:
        shapes = param_shapes(op, D, N, len(VOCAB))
        assert all(len(s) == 2 for s in shapes.values())
    assert param_shapes("And", D, N, 7) == {}
    assert param_shapes("Exist", D, N, 7)["W1"] == (N, N)


@pytest.mark.parametrize("op", ["Select", "RelateSub", "RelateObj", "FilterAttr", "FilterName"])
def test_zero_params_give_uniform_attention(op, inputs):
    V, t, a = inputs
    out = run(make_lib(zero=True), op, V, t, [] if op == "Select" else [a])
    np.testing.assert_allclose(out.value.value, np.full((N, 1), 1.0 / N))


@pytest.mark.parametrize("op", ["VerifyAttr", "Exist"])
def test_zero_params_give_half(op, inputs):
    V, t, a = inputs
    out = run(make_lib(zero=True), op, V, t, [a])
    assert out.value.value.item() == 0.5


def test_zero_params_verify_rel_gives_half(inputs):
    V, t, a = inputs
    assert run(make_lib(zero=True), "VerifyRel", V, t, [a, a]).value.value.item() == 0.5


def test_zero_params_query_name_is_uniform(inputs):
    V, t, a = inputs
    out = run(make_lib(zero=True), "QueryName", V, t, [a])
    np.testing.assert_allclose(out.value.value, np.full((len(VOCAB), 1), 1.0 / len(VOCAB)))


def test_zero_params_choose_splits_between_candidates(inputs):
    V, t, a = inputs
    out = run(make_lib(zero=True), "ChooseAttr", V, t, [a], "red|blue")
    v = out.value.value[:, 0]
    assert v[VOCAB.index("red")] == 0.5 and v[VOCAB.index("blue")] == 0.5
    assert v.sum() == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_choose_mass_stays_on_candidates(seed, inputs):
    V, t, a = inputs
    for op, arg in (("ChooseAttr", "red|green"), ("ChooseName", "cat|dog")):
        v = run(make_lib(seed), op, V, t, [a], arg).value.value[:, 0]
        picked = [VOCAB.index(c) for c in arg.split("|")]
        assert v[picked].sum() == pytest.approx(1.0, abs=1e-12)
        assert np.delete(v, picked).max() == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_outputs_are_well_formed(seed, inputs):
    V, t, a = inputs
    lib = make_lib(seed)
    for op, spec in CATALOG.items():
        if op in ("And", "Or"):
            continue
        deps = [a if k == "attention" else dc.constant(np.full((1, 1), 0.3)) for k in spec.input_kinds]
        arg = {"ChooseAttr": "red|blue", "ChooseName": "cat|dog"}.get(op, "x")
        v = run(lib, op, V, t, deps, arg).value.value
        if spec.output_kind == "boolean":
            assert 0.0 < v.item() < 1.0
        else:
            assert v.sum() == pytest.approx(1.0) and np.all(v >= 0)
            if spec.output_kind == "attention":
                assert np.all(v > 0)


probs = st.floats(0.0, 1.0, allow_nan=False)


def boolean(x):
    return dc.constant(np.full((1, 1), x))


def test_and_or_values():
    lib = make_lib()
    V = dc.constant(np.zeros((D, N)))
    assert run(lib, "And", V, None, [boolean(0.8), boolean(0.5)]).value.value.item() == pytest.approx(0.4)
    assert run(lib, "Or", V, None, [boolean(0.8), boolean(0.5)]).value.value.item() == pytest.approx(0.9)


@settings(max_examples=100, deadline=None)
@given(probs, probs)
def test_and_or_identities(x, y):
    lib = make_lib()
    V = dc.constant(np.zeros((D, N)))
    assert run(lib, "And", V, None, [boolean(1.0), boolean(x)]).value.value.item() == pytest.approx(x, abs=1e-15)
    assert run(lib, "Or", V, None, [boolean(0.0), boolean(x)]).value.value.item() == pytest.approx(x, abs=1e-15)
    got = run(lib, "Or", V, None, [boolean(x), boolean(y)]).value.value.item()
    assert got == pytest.approx(x + y - x * y, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_exist_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    lib = make_lib(seed % 7)
    a = rng.dirichlet(np.ones(N)).reshape(N, 1)
    perm = rng.permutation(N)
    V = dc.constant(rng.normal(size=(D, N)))
    b1 = run(lib, "Exist", V, None, [dc.constant(a)]).value.value.item()
    b2 = run(lib, "Exist", V, None, [dc.constant(a[perm])]).value.value.item()
    assert b1 == pytest.approx(b2, abs=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_relate_on_simplex_for_any_input(seed, inputs):
    V, t, _ = inputs
    rng = np.random.default_rng(seed)
    lib = make_lib(seed)
    for a in (np.full((N, 1), 1.0 / N), rng.dirichlet(np.ones(N)).reshape(N, 1), np.eye(N)[:, [seed]]):
        v = run(lib, "RelateObj", V, t, [dc.constant(a)]).value.value
        assert v.sum() == pytest.approx(1.0) and np.all(v > 0)


def test_input_errors(inputs):
    V, t, a = inputs
    lib = make_lib()
    with pytest.raises(ModuleInputError):
        lib("Select", ModuleIO(V, None))
    with pytest.raises(ModuleInputError):
        lib("And", ModuleIO(V, None, [a]))
    with pytest.raises(ModuleInputError):
        run(lib, "ChooseAttr", V, t, [a], "red")
    with pytest.raises(ModuleInputError):
        run(lib, "ChooseAttr", V, t, [a], "red|purple")


def test_parameters_are_shared_across_instances(inputs):
    V, t, a = inputs
    lib = make_lib()
    o1 = run(lib, "RelateSub", V, t, [a])
    o2 = run(lib, "RelateSub", V, t, [a])
    assert o1.value is not o2.value
    assert np.array_equal(o1.value.value, o2.value.value)
    assert "RelateObj.W1" in lib.store and lib.store.values["RelateSub.W1"] is not lib.store.values["RelateObj.W1"]


# -- behaviour after training -------------------------------------------------


class Probe:
    def __init__(self, ds, lib):
        self.ds, self.lib = ds, lib
        self.vocab = ds.vocab
        self.space = ConceptSpace(ds.vocab)
        self.proj = np.load(ds.root / "projection.npy")
        self.n = ds.n_boxes

    def text(self, w):
        return dc.constant(self.proj @ self.space.word(w))

    def att(self, slots):
        return dc.constant(attention_value(slots, self.n))

    def __call__(self, op, ex, arg=None, deps=()):
        V = dc.constant(ex.features.visual.astype(np.float64))
        t = self.text(arg) if CATALOG[op].takes_text_arg else None
        return self.lib(op, ModuleIO(V, t, list(deps), arg)).value.value


@pytest.fixture(scope="module")
def probe(trained):
    ds, lib = trained
    return Probe(ds, lib), ds.split("test")


def rate(hits):
    return sum(hits) / len(hits)


def test_trained_select_finds_unique_name(probe):
    p, exs = probe
    hits = []
    for ex in exs:
        names = [o.name for o in ex.scene.objects]
        for o in ex.scene.objects:
            if names.count(o.name) == 1:
                hits.append(int(np.argmax(p("Select", ex, o.name))) == o.slot)
    assert rate(hits) > 0.95


def test_trained_relate_lands_in_relation_target(probe):
    p, exs = probe
    hits = []
    for ex in exs:
        ops = SymbolicOps(ex.scene, p.vocab)
        for o in ex.scene.objects[:2]:
            for rel in p.vocab.spatial:
                target = ops.run("RelateSub", rel, [(o.slot,)])
                if target:
                    v = p("RelateSub", ex, rel, [p.att([o.slot])])
                    hits.append(int(np.argmax(v)) in target)
    assert rate(hits) > 0.9


def test_trained_filter_finds_sole_holder_of_attribute(probe):
    p, exs = probe
    hits = []
    for ex in exs:
        for attr in p.vocab.attributes:
            holders = [o.slot for o in ex.scene.objects if attr in o.attributes]
            if len(holders) == 1:
                hits.append(int(np.argmax(p("FilterAttr", ex, attr, [p.att([])]))) == holders[0])
    assert rate(hits) > 0.95


def test_trained_filter_moves_attention_off_non_matching(probe):
    """Select(name) then FilterAttr(color): mass leaves objects without the color."""
    p, exs = probe
    moved = []
    for ex in exs:
        for name in {o.name for o in ex.scene.objects}:
            same = [o for o in ex.scene.objects if o.name == name]
            colors = {o.attributes[0] for o in same}
            if len(same) < 2 or len(colors) < 2:
                continue
            color = same[0].attributes[0]
            sel = p("Select", ex, name)
            filt = p("FilterAttr", ex, color, [dc.constant(sel)])
            off = [o.slot for o in same if o.attributes[0] != color]
            moved.append(filt[off].sum() < sel[off].sum())
    assert len(moved) > 10 and rate(moved) > 0.9


def test_trained_verify_attr_confirms_color(probe):
    p, exs = probe
    vals = []
    for ex in exs:
        for o in ex.scene.objects:
            if o.attributes[0] == "red":
                vals.append(p("VerifyAttr", ex, "red", [p.att([o.slot])]).item())
    assert np.median(vals) > 0.9


def test_trained_exist(probe):
    p, exs = probe
    one_hot = [p("Exist", ex, None, [p.att([ex.scene.objects[0].slot])]).item() for ex in exs]
    empty = [p("Exist", ex, None, [p.att([])]).item() for ex in exs]
    assert min(one_hot) > 0.9
    assert max(empty) < 0.5


def test_trained_query_name_and_choose(probe):
    p, exs = probe
    vocab = p.ds.answer_vocab
    for ex in exs[:100]:
        o = ex.scene.objects[0]
        a = p.att([o.slot])
        assert vocab[int(np.argmax(p("QueryName", ex, None, [a])))] == o.name
        color = o.attributes[0]
        other = "blue" if color != "blue" else "red"
        assert vocab[int(np.argmax(p("ChooseAttr", ex, f"{color}|{other}", [a])))] == color
