"""On-disk synthetic datasets: generation and loading.

Layout of a dataset directory::

    dataset.json        generation spec, vocabulary, answer vocabulary
    projection.npy      fixed concept -> feature map
    scenes.jsonl        one scene per example
    programs.jsonl      one program per line (the program wire format)
    truths.jsonl        oracle outputs, keyed by id
    manifest.jsonl      id, split, template, feature file
    train.txt/test.txt  ids per split
    features/<id>.nmnf  binary feature files
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .program import Program, parse_program
from .synthdata import (
    ConceptSpace,
    DataError,
    FeatureSet,
    FeatureSynthConfig,
    NoSatisfiableTemplate,
    OracleTruth,
    Scene,
    Templates,
    Vocab,
    encode_features,
    generate_program,
    generate_scene,
    load_features,
    make_projection,
    save_features,
)

SPLITS = ("train", "test")


@dataclass
class DataSpec:
    seed: int = 0
    n_train: int = 5000
    n_test: int = 1000
    d: int = 64
    n_boxes: int = 16
    min_objects: int = 3
    max_objects: int = 6
    noise_sigma: float = 0.05
    templates: Optional[List[str]] = None

    def validate(self) -> None:
        if self.n_train < 0 or self.n_test < 0:
            raise DataError("split sizes must be non-negative")
        if not 0 <= self.min_objects <= self.max_objects:
            raise DataError("need 0 <= min_objects <= max_objects")
        if self.max_objects > self.n_boxes:
            raise DataError(f"max_objects={self.max_objects} exceeds n_boxes={self.n_boxes}")
        if self.d <= 0 or self.n_boxes <= 0:
            raise DataError("d and n_boxes must be positive")
        if self.templates is not None:
            unknown = set(self.templates) - set(Templates(Vocab()).names)
            if unknown:
                raise DataError(f"unknown templates {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise DataError(f"unknown data spec keys {sorted(extra)}")
        return cls(**d)


@dataclass
class Example:
    id: str
    split: str
    template: str
    program: Program
    truth: OracleTruth
    scene: Scene
    features: FeatureSet


def example_rng(seed: int, split: str, index: int) -> np.random.Generator:
    # train and test scenes come from disjoint seed streams
    return np.random.default_rng([seed, SPLITS.index(split), index])


def make_example(spec: DataSpec, vocab: Vocab, projection: np.ndarray, split: str, index: int) -> Example:
    rng = example_rng(spec.seed, split, index)
    ex_id = f"{split}-{index:06d}"
    cfg = FeatureSynthConfig(spec.d, spec.noise_sigma, spec.seed)
    for _attempt in range(1000):
        n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        scene = generate_scene(rng, vocab, n_obj, spec.n_boxes, scene_id=ex_id)
        try:
            program, truth, template = generate_program(rng, scene, spec.templates, vocab, ex_id)
            break
        except NoSatisfiableTemplate:
            continue
    else:
        raise DataError(f"{ex_id}: no satisfiable template after 1000 scenes")
    args = [s.arg for s in program.steps if s.arg is not None]
    features = encode_features(scene, args, cfg, projection, vocab, rng)
    return Example(ex_id, split, template, program, truth, scene, features)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def generate_dataset(spec: DataSpec, out: os.PathLike, vocab: Vocab = Vocab()) -> Path:
    spec.validate()
    out = Path(out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    space = ConceptSpace(vocab)
    projection = make_projection(FeatureSynthConfig(spec.d, spec.noise_sigma, spec.seed), space.size)
    np.save(out / "projection.npy", projection)
    meta = {
        "version": 1,
        "spec": asdict(spec),
        "vocab": vocab.to_dict(),
        "answer_vocab": vocab.answers,
        "concept_size": space.size,
    }
    (out / "dataset.json").write_text(_dumps(meta) + "\n", encoding="utf-8")

    files = {k: open(out / f"{k}.jsonl", "w", encoding="utf-8") for k in ("scenes", "programs", "truths", "manifest")}
    try:
        for split in SPLITS:
            n = spec.n_train if split == "train" else spec.n_test
            ids = []
            for i in range(n):
                ex = make_example(spec, vocab, projection, split, i)
                feat_rel = f"features/{ex.id}.nmnf"
                save_features(out / feat_rel, ex.features)
                files["scenes"].write(_dumps(ex.scene.to_dict()) + "\n")
                files["programs"].write(ex.program.serialize() + "\n")
                files["truths"].write(_dumps({"id": ex.id, **ex.truth.to_dict()}) + "\n")
                files["manifest"].write(
                    _dumps({"id": ex.id, "split": split, "template": ex.template, "features": feat_rel, "scene": ex.scene.id})
                    + "\n"
                )
                ids.append(ex.id)
            (out / f"{split}.txt").write_text("".join(i + "\n" for i in ids), encoding="utf-8")
    finally:
        for fh in files.values():
            fh.close()
    return out


@dataclass
class Dataset:
    root: Path
    meta: dict
    vocab: Vocab
    answer_vocab: List[str]
    examples: Dict[str, Example] = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.meta["spec"]["d"]

    @property
    def n_boxes(self) -> int:
        return self.meta["spec"]["n_boxes"]

    def split(self, name: str) -> List[Example]:
        return [e for e in self.examples.values() if e.split == name]


def _read_jsonl(path: Path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(root: os.PathLike, limit: Optional[Dict[str, int]] = None) -> Dataset:
    root = Path(root)
    if not (root / "dataset.json").exists():
        raise DataError(f"{root} is not a dataset directory (missing dataset.json)")
    meta = json.loads((root / "dataset.json").read_text(encoding="utf-8"))
    vocab = Vocab.from_dict(meta["vocab"])
    ds = Dataset(root, meta, vocab, list(meta["answer_vocab"]))
    scenes = {s["id"]: Scene.from_dict(s) for s in _read_jsonl(root / "scenes.jsonl")}
    truths = {t["id"]: OracleTruth.from_dict(t) for t in _read_jsonl(root / "truths.jsonl")}
    with open(root / "programs.jsonl", encoding="utf-8") as fh:
        programs = {p.id: p for p in (parse_program(line) for line in fh if line.strip())}
    taken: Dict[str, int] = {}
    for row in _read_jsonl(root / "manifest.jsonl"):
        split = row["split"]
        if limit is not None and split in limit and taken.get(split, 0) >= limit[split]:
            continue
        taken[split] = taken.get(split, 0) + 1
        fs = load_features(root / row["features"], ds.d, ds.n_boxes)
        fs.answer_vocab = ds.answer_vocab
        ds.examples[row["id"]] = Example(
            row["id"], split, row["template"], programs[row["id"]], truths[row["id"]], scenes[row["scene"]], fs
        )
    return ds
