"""Training loop, evaluation and checkpoint handling."""
from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import diffcore as dc
from .dataset import Dataset, Example, load_dataset
from .executor import GuidancePolicy, NumericError, execute, instantiate
from .guidance import LossWeights, MatchConfig, ScheduleConfig, build_targets, epsilon_schedule, multitask_loss
from .modules import NeuralModules
from .program import ANSWER, ATTENTION, BOOLEAN
from .synthdata import NO, YES, DataError, OracleModules

METRIC_KEYS = ("epoch", "epsilon", "L", "L_att", "L_bool", "L_answer", "train_acc", "test_acc")
ABLATION_KEYS = ("tf.kind", "tf.horizon", "match.mode", "loss.alpha", "loss.beta", "loss.gamma")

# the six ablation rows plus the unguided baseline, as dotted-key overrides
PRESETS: Dict[str, Dict[str, object]] = {
    "tf-mt-soft": {"tf.kind": "linear", "match.mode": "soft", "loss.alpha": 1.0, "loss.beta": 1.0, "loss.gamma": 1.0},
    "tf-mt-hard": {"tf.kind": "linear", "match.mode": "hard", "loss.alpha": 1.0, "loss.beta": 1.0, "loss.gamma": 1.0},
    "mt-soft": {"tf.kind": "constant", "tf.value": 0.0, "match.mode": "soft", "loss.alpha": 1.0, "loss.beta": 1.0, "loss.gamma": 1.0},
    "mt-hard": {"tf.kind": "constant", "tf.value": 0.0, "match.mode": "hard", "loss.alpha": 1.0, "loss.beta": 1.0, "loss.gamma": 1.0},
    "tf-soft": {"tf.kind": "linear", "match.mode": "soft", "loss.alpha": 0.0, "loss.beta": 0.0, "loss.gamma": 1.0},
    "tf-hard": {"tf.kind": "linear", "match.mode": "hard", "loss.alpha": 0.0, "loss.beta": 0.0, "loss.gamma": 1.0},
    "baseline": {"tf.kind": "constant", "tf.value": 0.0, "loss.alpha": 0.0, "loss.beta": 0.0, "loss.gamma": 1.0},
}


class ConfigError(ValueError):
    pass


def flatten(d: dict, prefix: str = "") -> Dict[str, object]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class TrainConfig:
    data: Optional[str] = None
    out: str = "run"
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 1
    max_train: Optional[int] = None
    max_test: Optional[int] = None
    verbose: bool = False
    optim: dc.OptimizerConfig = field(default_factory=lambda: dc.OptimizerConfig(lr=3e-3))
    tf: ScheduleConfig = field(default_factory=lambda: ScheduleConfig("linear", horizon=10))
    granularity: str = "edge"
    match: MatchConfig = field(default_factory=MatchConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    _SECTIONS = {"optim": ("kind", "lr"), "tf": ("kind", "horizon", "floor", "value", "steepness"), "match": ("mode", "tau"), "loss": ("alpha", "beta", "gamma")}

    def to_dict(self) -> Dict[str, object]:
        out = {k: getattr(self, k) for k in ("data", "out", "epochs", "batch_size", "seed", "eval_every", "max_train", "max_test", "verbose")}
        for sec, keys in self._SECTIONS.items():
            for k in keys:
                out[f"{sec}.{k}"] = getattr(getattr(self, sec), k)
        out["tf.granularity"] = self.granularity
        return dict(sorted(out.items()))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        flat = flatten(d)
        base = cls().to_dict()
        unknown = set(flat) - set(base)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        base.update(flat)
        try:
            cfg = cls(
                **{k: base[k] for k in ("data", "out", "epochs", "batch_size", "seed", "eval_every", "max_train", "max_test", "verbose")},
                optim=dc.OptimizerConfig(kind=base["optim.kind"], lr=float(base["optim.lr"])),
                tf=ScheduleConfig(
                    kind=base["tf.kind"],
                    horizon=base["tf.horizon"],
                    floor=float(base["tf.floor"]),
                    value=float(base["tf.value"]),
                    steepness=float(base["tf.steepness"]),
                ),
                granularity=base["tf.granularity"],
                match=MatchConfig(base["match.mode"], float(base["match.tau"])),
                loss=LossWeights(float(base["loss.alpha"]), float(base["loss.beta"]), float(base["loss.gamma"])),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.epochs < 0 or cfg.batch_size < 1 or cfg.eval_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and eval_every >= 1 are required")
        if cfg.granularity not in ("edge", "program"):
            raise ConfigError(f"unknown tf.granularity {cfg.granularity!r}")
        return cfg

    def ablation_fields(self) -> Dict[str, object]:
        d = self.to_dict()
        return {k: d[k] for k in ABLATION_KEYS}


def parse_override(text: str):
    """``key=value`` with the value read as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(out: Path, store: dc.ParameterStore, cfg: TrainConfig, ds_meta: dict, epoch: int, extra: Optional[dict] = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "checkpoint.nmnp"
    side = {
        "config": cfg.to_dict(),
        "d": ds_meta["spec"]["d"],
        "n_boxes": ds_meta["spec"]["n_boxes"],
        "answer_vocab": ds_meta["answer_vocab"],
        "epoch": epoch,
    }
    side.update(extra or {})
    _atomic_write(path, store.to_bytes())
    _atomic_write(out / "checkpoint.json", (json.dumps(side, sort_keys=True, indent=1) + "\n").encode())
    return path


@dataclass
class Checkpoint:
    store: dc.ParameterStore
    meta: dict

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])

    def modules(self) -> NeuralModules:
        lib = NeuralModules(self.store, self.meta["d"], self.meta["n_boxes"], self.meta["answer_vocab"])
        lib.check_dims()
        return lib


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.nmnp"
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    side = path.with_suffix(".json")
    if not side.exists():
        raise DataError(f"checkpoint sidecar {side} not found")
    try:
        store = dc.ParameterStore.load(path)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return Checkpoint(store, json.loads(side.read_text(encoding="utf-8")))


def fresh_modules(ds: Dataset, seed: int) -> NeuralModules:
    store = dc.ParameterStore(seed=seed)
    lib = NeuralModules(store, ds.d, ds.n_boxes, ds.answer_vocab)
    lib.init_params()
    return lib


def check_compatible(lib: NeuralModules, ds: Dataset) -> None:
    if (lib.d, lib.n_boxes) != (ds.d, ds.n_boxes):
        raise dc.ShapeError(f"checkpoint has d={lib.d}, n_boxes={lib.n_boxes}; dataset has d={ds.d}, n_boxes={ds.n_boxes}")
    if list(lib.answer_vocab) != list(ds.answer_vocab):
        raise dc.ShapeError("checkpoint and dataset answer vocabularies differ")


# ---------------------------------------------------------------------------
# evaluation


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("NMN_THREADS", "1")))
    except ValueError:
        return 1


def _eval_one(ex: Example, modules_for: Callable[[Example], object]):
    plan = instantiate(ex.program, ex.features, modules_for(ex))
    tr = execute(plan, GuidancePolicy(0.0, "inference"), answer=ex.truth.answer)
    inter = []
    for rec, sym in zip(tr.steps, ex.truth.steps):
        v = rec.values
        if rec.kind == ATTENTION:
            if len(sym) == 0:
                continue
            inter.append((rec.op, int(np.argmax(v[:, 0])) in set(sym)))
        elif rec.kind == BOOLEAN:
            inter.append((rec.op, bool(v.item() >= 0.5) == bool(sym)))
        elif rec.kind == ANSWER:
            inter.append((rec.op, tr.answer_vocab[int(np.argmax(v[:, 0]))] == sym))
    return tr.correct, inter


def evaluate(examples: List[Example], modules_for: Callable[[Example], object], threads: Optional[int] = None) -> dict:
    """Inference-mode accuracy report: overall, yes/no subset, per template and per opcode."""
    threads = threads or n_threads()
    if threads > 1 and len(examples) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda e: _eval_one(e, modules_for), examples))
    else:
        results = [_eval_one(e, modules_for) for e in examples]
    per_t, per_op, binary = defaultdict(list), defaultdict(list), []
    for ex, (ok, inter) in zip(examples, results):
        per_t[ex.template].append(ok)
        if ex.truth.answer in (YES, NO):
            binary.append(ok)
        for op, hit in inter:
            per_op[op].append(hit)
    acc = lambda xs: float(np.mean(xs)) if xs else None
    return {
        "n": len(examples),
        "accuracy": acc([r[0] for r in results]),
        "n_binary": len(binary),
        "binary_accuracy": acc(binary),
        "per_template": {k: acc(v) for k, v in sorted(per_t.items())},
        "per_opcode": {k: acc(v) for k, v in sorted(per_op.items())},
    }


def neural(lib) -> Callable[[Example], object]:
    return lambda ex: lib


def oracle(answer_vocab) -> Callable[[Example], object]:
    return lambda ex: OracleModules(ex.scene, answer_vocab)


# ---------------------------------------------------------------------------
# training


def _limits(cfg: TrainConfig) -> Optional[Dict[str, int]]:
    lim = {}
    if cfg.max_train is not None:
        lim["train"] = cfg.max_train
    if cfg.max_test is not None:
        lim["test"] = cfg.max_test
    return lim or None


def train(cfg: TrainConfig, log: Optional[Callable[[str], None]] = None, ds: Optional[Dataset] = None) -> dict:
    """Run the configured training; writes metrics.jsonl, config.json and checkpoints under ``cfg.out``.

    Raises :class:`NumericError` on a non-finite loss; the checkpoint from
    the last completed evaluation stays on disk.
    """
    if ds is None:
        if cfg.data is None or not Path(cfg.data).is_dir():
            raise DataError(f"dataset directory {cfg.data!r} does not exist")
        ds = load_dataset(cfg.data, _limits(cfg))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")

    train_set, test_set = ds.split("train"), ds.split("test")
    if not train_set:
        raise DataError("training split is empty")
    lib = fresh_modules(ds, cfg.seed)
    store = lib.store
    rng = np.random.default_rng([cfg.seed, 1])
    targets = [build_targets(e.truth, e.scene, e.features.boxes, cfg.match) for e in train_set]

    history = []
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as mfh:
        for epoch in range(cfg.epochs):
            eps = epsilon_schedule(epoch, cfg.tf)
            policy = GuidancePolicy(eps, "train", rng, cfg.granularity)
            order = rng.permutation(len(train_set))
            sums = np.zeros(4)
            n_batches, n_correct = 0, 0
            for b in range(0, len(order), cfg.batch_size):
                traces = []
                for i in order[b : b + cfg.batch_size]:
                    ex = train_set[i]
                    plan = instantiate(ex.program, ex.features, lib)
                    traces.append(execute(plan, policy, targets[i], ex.truth.answer))
                lb = multitask_loss(traces, cfg.loss, cfg.match)
                if not math.isfinite(lb.value):
                    raise NumericError(-1, f"non-finite loss at epoch {epoch}, batch {b // cfg.batch_size}")
                dc.backward(lb.L)
                dc.optimizer_step(store, cfg.optim)
                sums += (lb.value, lb.L_att, lb.L_bool, lb.L_answer)
                n_batches += 1
                n_correct += sum(t.correct for t in traces)
                if cfg.verbose and log is not None:
                    log(json.dumps({"epoch": epoch, "batch": n_batches - 1, "L": lb.value}))
            test_acc = None
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                if test_set:
                    test_acc = evaluate(test_set, neural(lib))["accuracy"]
                save_checkpoint(out, store, cfg, ds.meta, epoch, {"test_acc": test_acc})
            means = sums / max(n_batches, 1)
            row = dict(
                zip(
                    METRIC_KEYS,
                    (epoch, eps, float(means[0]), float(means[1]), float(means[2]), float(means[3]), n_correct / len(train_set), test_acc),
                )
            )
            line = json.dumps(row)
            mfh.write(line + "\n")
            mfh.flush()
            if log is not None:
                log(line)
            history.append(row)
    if cfg.epochs == 0:
        save_checkpoint(out, store, cfg, ds.meta, -1, {"test_acc": None})
    return {"history": history, "store": store, "modules": lib}
