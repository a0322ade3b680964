from __future__ import annotations

import struct

import numpy as np
import pytest

from nmn.dataset import DataSpec, generate_dataset, load_dataset
from nmn.program import Program, ProgramStep, validate_program
from nmn.synthdata import (
    NO,
    YES,
    ConceptSpace,
    DataError,
    FeatureSet,
    FeatureSynthConfig,
    Scene,
    SceneObject,
    Vocab,
    encode_features,
    features_from_bytes,
    features_to_bytes,
    generate_program,
    generate_scene,
    load_features,
    make_projection,
    oracle_execute,
    save_features,
    spatial_relations,
    symbolic_relations,
)

VOCAB = Vocab()


def obj(name, attrs, cx, cy, slot, r=0.05):
    return SceneObject(name, tuple(attrs), (cx - r, cy - r, cx + r, cy + r), slot)


def scene_of(objects, n_boxes=8):
    boxes = [(0.9, 0.9, 0.95, 0.95)] * n_boxes
    for o in objects:
        boxes[o.slot] = o.box
    s = Scene("hand", list(objects), boxes)
    s.relations = spatial_relations(s.objects) + symbolic_relations(s.objects, VOCAB)
    return s


def prog(*steps):
    return Program("p", [ProgramStep(i, op, tuple(deps), arg) for i, (op, deps, arg) in enumerate(steps)])


def test_scene_without_objects():
    s = generate_scene(np.random.default_rng(0), VOCAB, 0, 16)
    assert s.objects == [] and len(s.boxes) == 16 and s.relations == []


def test_scene_generation_is_seeded():
    a = generate_scene(np.random.default_rng(5), VOCAB, 5, 16)
    b = generate_scene(np.random.default_rng(5), VOCAB, 5, 16)
    assert a.to_dict() == b.to_dict()


def test_too_many_objects():
    with pytest.raises(DataError):
        generate_scene(np.random.default_rng(0), VOCAB, 17, 16)


def test_spatial_relations_follow_geometry():
    rng = np.random.default_rng(1)
    checks = {"right of": lambda a, b: a[0] > b[0], "left of": lambda a, b: a[0] < b[0],
              "above": lambda a, b: a[1] < b[1], "below": lambda a, b: a[1] > b[1]}
    n = 0
    for _ in range(1000):
        s = generate_scene(rng, VOCAB, int(rng.integers(2, 7)), 16)
        cen = [((o.box[0] + o.box[2]) / 2, (o.box[1] + o.box[3]) / 2) for o in s.objects]
        rels = set(s.relations)
        for i in range(len(cen)):
            for j in range(len(cen)):
                if i == j:
                    continue
                for name, holds in checks.items():
                    assert ((i, name, j) in rels) == holds(cen[i], cen[j])
                    n += 1
    assert n > 10_000


def test_oracle_select_and_exist_empty():
    s = scene_of([obj("laptop", ["red", "metal"], 0.3, 0.3, 3), obj("cat", ["white", "fabric"], 0.6, 0.6, 5)])
    t = oracle_execute(prog(("Select", (), "laptop"), ("QueryName", (0,), None)), s)
    assert t.steps[0] == (3,) and t.answer == "laptop"
    t = oracle_execute(prog(("Select", (), "dog"), ("Exist", (0,), None)), s)
    assert t.steps == [(), False] and t.answer == NO


def test_oracle_chain_on_hand_scene():
    # laptop top-left; the cat sits to its right, above the sofa
    s = scene_of(
        [
            obj("laptop", ["black", "metal"], 0.1, 0.1, 0),
            obj("cat", ["white", "fabric"], 0.5, 0.3, 1),
            obj("sofa", ["red", "fabric"], 0.5, 0.7, 2),
        ]
    )
    p = prog(
        ("Select", (), "laptop"),
        ("RelateSub", (0,), "right of"),
        ("FilterName", (1,), "cat"),
        ("RelateObj", (2,), "above"),
        ("QueryName", (3,), None),
    )
    t = oracle_execute(p, s)
    assert t.steps[:4] == [(0,), (1, 2), (1,), (2,)]
    assert t.answer == "sofa"


def test_oracle_filter_exist_without_white_object():
    s = scene_of([obj("bike", ["red", "wood"], 0.4, 0.4, 0)])
    t = oracle_execute(prog(("Select", (), "bike"), ("FilterAttr", (0,), "white"), ("Exist", (1,), None)), s)
    assert t.steps[1] == () and t.steps[2] is False and t.answer == "no"


def test_symbolic_relations():
    s = scene_of([obj("cup", ["red", "glass"], 0.2, 0.2, 0), obj("book", ["red", "wood"], 0.7, 0.7, 1)])
    assert (0, "same color", 1) in s.relations and (0, "same material", 1) not in s.relations
    assert not any(a == b for a, _, b in s.relations)


def test_generated_programs_are_valid_and_consistent():
    rng = np.random.default_rng(42)
    seen = set()
    made = 0
    while made < 10_000:
        s = generate_scene(rng, VOCAB, int(rng.integers(3, 7)), 16)
        try:
            p, truth, name = generate_program(rng, s, None, VOCAB)
        except DataError:
            continue
        assert validate_program(p) == []
        assert oracle_execute(p, s).answer == truth.answer
        assert truth.answer in VOCAB.answers
        seen.add(name)
        made += 1
    assert len(seen) == 11


def test_query_name_template_on_unique_cat():
    s = scene_of([obj("cat", ["black", "wood"], 0.3, 0.3, 4), obj("dog", ["red", "wood"], 0.7, 0.7, 1)])
    asked = set()
    for seed in range(20):
        p, truth, _ = generate_program(np.random.default_rng(seed), s, ["query_name"], VOCAB)
        asked.add(p.steps[0].arg)
        if p.steps[0].arg == "cat":
            assert truth.answer == "cat" and truth.steps[0] == (4,)
        assert truth.answer == p.steps[0].arg
    assert "cat" in asked


# -- features -----------------------------------------------------------------


def clean_features(scene, args=()):
    cfg = FeatureSynthConfig(d=64, noise_sigma=0.0, seed=3)
    proj = make_projection(cfg, ConceptSpace(VOCAB).size)
    return encode_features(scene, list(args), cfg, proj, VOCAB), proj


def test_projection_has_orthonormal_columns():
    proj = make_projection(FeatureSynthConfig(64, 0.0, 0), ConceptSpace(VOCAB).size)
    np.testing.assert_allclose(proj.T @ proj, np.eye(proj.shape[1]), atol=1e-10)


def test_identical_concepts_give_identical_columns():
    a = obj("cup", ["red", "glass"], 0.3, 0.3, 0)
    b = SceneObject("cup", ("red", "glass"), a.box, 1)
    fs, _ = clean_features(scene_of([a, b], 4))
    np.testing.assert_array_equal(fs.visual[:, 0], fs.visual[:, 1])


def test_distinct_concepts_give_distinct_columns():
    rng = np.random.default_rng(0)
    objs = []
    for k, name in enumerate(VOCAB.names[:8]):
        attrs = [c[int(rng.integers(5))] for _, c in VOCAB.categories]
        objs.append(SceneObject(name, tuple(attrs), (0.1, 0.1, 0.2, 0.2), k))
    fs, _ = clean_features(scene_of(objs, 8))
    cols = {tuple(np.round(fs.visual[:, j], 5)) for j in range(8)}
    assert len(cols) == 8


def test_text_embeddings_cover_args(small_ds):
    for ex in small_ds.split("test")[:30]:
        for s in ex.program.steps:
            if s.arg is not None:
                assert s.arg in ex.features.text_args


def sample_features(rng, d=6, n=3, args=("red", "left of")):
    xy = rng.uniform(0, 0.5, size=(n, 2))
    boxes = np.hstack([xy, xy + rng.uniform(0.05, 0.5, size=(n, 2))]).astype(np.float32)
    return FeatureSet(boxes, rng.normal(size=(d, n)).astype(np.float32), {a: rng.normal(size=d).astype(np.float32) for a in args})


def hand_written_nmnf(fs):
    """NMNF encoder written straight from the byte layout."""
    out = b"NMNF" + struct.pack("<III", 1, fs.d, fs.n_boxes)
    for b in fs.boxes:
        out += struct.pack("<4f", *b)
    for j in range(fs.n_boxes):
        out += struct.pack(f"<{fs.d}f", *fs.visual[:, j])
    out += struct.pack("<I", len(fs.text_args))
    for k in sorted(fs.text_args):
        raw = k.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw + struct.pack(f"<{fs.d}f", *fs.text_args[k])
    return out


def test_nmnf_layout_matches_hand_encoder(rng):
    fs = sample_features(rng, args=("red", "left of", "café"))
    assert features_to_bytes(fs) == hand_written_nmnf(fs)


def test_nmnf_round_trip(tmp_path, rng):
    fs = sample_features(rng)
    save_features(tmp_path / "f.nmnf", fs)
    back = load_features(tmp_path / "f.nmnf")
    assert back.equals(fs)
    assert features_to_bytes(back) == features_to_bytes(fs)


def test_nmnf_accepts_large_dims(tmp_path, rng):
    fs = sample_features(rng, d=768, n=36)
    save_features(tmp_path / "big.nmnf", fs)
    back = load_features(tmp_path / "big.nmnf", expect_d=768, expect_n=36)
    assert back.visual.shape == (768, 36)


def test_nmnf_errors(rng):
    data = features_to_bytes(sample_features(rng))
    with pytest.raises(DataError, match="magic"):
        features_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(DataError, match="truncated"):
        features_from_bytes(data[:-3])
    with pytest.raises(DataError, match="truncated"):
        features_from_bytes(data[:10])
    with pytest.raises(DataError, match="dim mismatch"):
        features_from_bytes(data, expect_d=7)
    with pytest.raises(DataError, match="version"):
        features_from_bytes(data[:4] + struct.pack("<I", 2) + data[8:])


# -- datasets -----------------------------------------------------------------


def test_dataset_split_sizes_and_ids(small_ds):
    assert len(small_ds.split("train")) == 400 and len(small_ds.split("test")) == 200
    assert small_ds.answer_vocab[:2] == [YES, NO]


def test_dataset_splits_use_distinct_scenes(small_ds):
    sig = lambda ex: tuple(np.round(np.asarray(ex.scene.boxes).ravel(), 6))
    train = {sig(e) for e in small_ds.split("train")}
    assert not any(sig(e) in train for e in small_ds.split("test"))


def test_generation_is_byte_identical(tmp_path):
    spec = DataSpec(seed=3, n_train=20, n_test=10)
    a, b = generate_dataset(spec, tmp_path / "a"), generate_dataset(spec, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_default_spec_and_validation():
    spec = DataSpec()
    assert (spec.n_train, spec.n_test, spec.d, spec.n_boxes) == (5000, 1000, 64, 16)
    with pytest.raises(DataError):
        DataSpec(max_objects=20).validate()
    with pytest.raises(DataError):
        DataSpec(templates=["nope"]).validate()
    with pytest.raises(DataError):
        DataSpec.from_dict({"n_trian": 3})


def test_load_limit_and_missing_dir(small_data, tmp_path):
    ds = load_dataset(small_data, {"test": 5})
    assert len(ds.split("test")) == 5 and len(ds.split("train")) == 400
    with pytest.raises(DataError):
        load_dataset(tmp_path)
