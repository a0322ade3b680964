from __future__ import annotations

import json
import re
import subprocess
import sys

import jsonschema
import pytest

from nmn.cli import main
from nmn.dataset import load_dataset
from nmn.render import trace_schema
from nmn.training import ABLATION_KEYS, METRIC_KEYS


def run(args, capsys):
    code = main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_console_script_usage_error():
    proc = subprocess.run([sys.executable, "-m", "nmn.cli", "frobulate"], capture_output=True, text=True)
    assert proc.returncode == 1
    proc = subprocess.run([sys.executable, "-m", "nmn.cli", "gradcheck", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == 1


def test_gen_data_errors(tmp_path, capsys):
    assert run(["gen-data", "--out", tmp_path / "x", "--set", "max_objects=20"], capsys)[0] == 2
    assert run(["gen-data", "--out", tmp_path / "x", "--set", "colour=1"], capsys)[0] == 2
    assert run(["gen-data"], capsys)[0] == 1
    assert run(["gen-data", "--out", tmp_path / "x", "--config", tmp_path / "missing.json"], capsys)[0] == 1


def test_gen_data_config_file_and_flags(tmp_path, capsys):
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps({"n_train": 7, "n_test": 3, "seed": 1}))
    assert run(["gen-data", "--config", cfg, "--seed", 9, "--set", "n_test=4", "--out", tmp_path / "d"], capsys)[0] == 0
    meta = json.loads((tmp_path / "d" / "dataset.json").read_text())
    assert meta["spec"]["seed"] == 9 and meta["spec"]["n_train"] == 7 and meta["spec"]["n_test"] == 4
    assert len((tmp_path / "d" / "manifest.jsonl").read_text().splitlines()) == 11


def test_train_metrics_log(small_run):
    lines = (small_run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    rows = [json.loads(l) for l in lines]
    for row in rows:
        assert tuple(row) == METRIC_KEYS
    assert rows[0]["epsilon"] == 1.0
    assert [r["epoch"] for r in rows] == [0, 1, 2]


def test_train_epoch_zero_epsilon_with_horizon_ten(small_data, tmp_path, capsys):
    code, out, _ = run(["train", "--data", small_data, "--out", tmp_path / "r", "--set", "epochs=1", "--set", "max_train=32", "--set", "max_test=8"], capsys)
    assert code == 0
    assert json.loads(out.splitlines()[0])["epsilon"] == 1.0


def test_train_is_reproducible(small_data, tmp_path, capsys):
    args = ["train", "--data", small_data, "--set", "epochs=2", "--set", "max_train=64", "--set", "max_test=20", "--seed", 5]
    assert run(args + ["--out", tmp_path / "a"], capsys)[0] == 0
    assert run(args + ["--out", tmp_path / "b"], capsys)[0] == 0
    for f in ("metrics.jsonl", "checkpoint.nmnp"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_errors(small_data, tmp_path, capsys):
    assert run(["train", "--data", tmp_path / "nope", "--out", tmp_path / "r"], capsys)[0] == 2
    assert run(["train", "--data", small_data, "--out", tmp_path / "r", "--set", "loss.alpha=-1"], capsys)[0] == 1
    assert run(["train", "--data", small_data, "--out", tmp_path / "r", "--set", "tf.knd=linear"], capsys)[0] == 1
    assert run(["train", "--data", small_data, "--preset", "everything"], capsys)[0] == 1


def test_baseline_preset_has_no_guidance(small_data, tmp_path, capsys):
    code, out, _ = run(["train", "--data", small_data, "--preset", "baseline", "--out", tmp_path / "b", "--set", "epochs=1", "--set", "max_train=32", "--set", "max_test=8"], capsys)
    assert code == 0
    row = json.loads(out.splitlines()[0])
    assert row["epsilon"] == 0.0
    assert row["L"] == pytest.approx(row["L_answer"], rel=1e-12)
    cfg = json.loads((tmp_path / "b" / "config.json").read_text())
    assert cfg["loss.alpha"] == 0.0 and cfg["loss.beta"] == 0.0


def test_eval_report(small_run, small_data, capsys):
    code, out, _ = run(["eval", "--checkpoint", small_run, "--data", small_data], capsys)
    assert code == 0
    rep = json.loads(out)
    for k in ABLATION_KEYS:
        assert k in rep
    assert len(ABLATION_KEYS) == 6
    assert rep["n"] == 200 and 0.0 <= rep["accuracy"] <= 1.0
    assert rep["per_template"] and rep["per_opcode"]
    # matches the accuracy logged at the last epoch
    last = json.loads((small_run / "metrics.jsonl").read_text().splitlines()[-1])
    assert rep["accuracy"] == last["test_acc"]


def test_eval_oracle_is_perfect(small_data, capsys):
    code, out, _ = run(["eval", "--oracle", "--data", small_data], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["accuracy"] == 1.0
    assert all(v == 1.0 for v in rep["per_opcode"].values())


def test_eval_errors(small_run, small_data, tmp_path, capsys):
    assert run(["eval", "--data", small_data], capsys)[0] == 1
    assert run(["eval", "--checkpoint", tmp_path, "--data", small_data], capsys)[0] == 2
    other = tmp_path / "d"
    assert run(["gen-data", "--out", other, "--set", "n_train=2", "--set", "n_test=2", "--set", "d=32"], capsys)[0] == 0
    assert run(["eval", "--checkpoint", small_run, "--data", other], capsys)[0] == 2


def test_checkpoint_eval_round_trip(small_run, small_data, tmp_path, capsys):
    from nmn.training import load_checkpoint

    ck = load_checkpoint(small_run)
    copy = tmp_path / "copy"
    copy.mkdir()
    (copy / "checkpoint.nmnp").write_bytes(ck.store.to_bytes())
    (copy / "checkpoint.json").write_text((small_run / "checkpoint.json").read_text())
    assert (copy / "checkpoint.nmnp").read_bytes() == (small_run / "checkpoint.nmnp").read_bytes()
    a = json.loads(run(["eval", "--checkpoint", small_run, "--data", small_data], capsys)[1])
    b = json.loads(run(["eval", "--checkpoint", copy, "--data", small_data], capsys)[1])
    a.pop("model"), b.pop("model")
    assert a == b


def test_untrained_model_is_at_chance_on_yes_no(tmp_path, capsys):
    data = tmp_path / "d"
    assert run(["gen-data", "--out", data, "--set", "n_train=8", "--set", "n_test=1000"], capsys)[0] == 0
    assert run(["train", "--data", data, "--out", tmp_path / "r", "--set", "epochs=0"], capsys)[0] == 0
    rep = json.loads(run(["eval", "--checkpoint", tmp_path / "r", "--data", data], capsys)[1])
    assert rep["n_binary"] > 300
    assert abs(rep["binary_accuracy"] - 0.5) <= 0.05


def exist_example(ds):
    return next(e for e in ds.split("test") if e.program.steps[-1].op == "Exist")


def test_trace_json_matches_schema(small_run, small_data, capsys):
    ds = load_dataset(small_data)
    for ex in ds.split("test")[:10] + [exist_example(ds)]:
        code, out, _ = run(["trace", "--checkpoint", small_run, "--data", small_data, "--example", ex.id], capsys)
        assert code == 0
        doc = json.loads(out)
        jsonschema.validate(doc, trace_schema())
        assert len(doc["steps"]) == len(ex.program.steps)
        assert doc["answer"] == ex.truth.answer


def test_trace_html_for_exist_question(small_run, small_data, tmp_path, capsys):
    ex = exist_example(load_dataset(small_data))
    out = tmp_path / "t.html"
    assert run(["trace", "--checkpoint", small_run, "--data", small_data, "--example", ex.id, "--render", "html", "--out", out], capsys)[0] == 0
    html = out.read_text()
    assert "<script" not in html and "http" not in html.replace("http://www.w3.org/2000/svg", "")
    kinds = re.findall(r'data-kind="(\w+)"', html)
    assert kinds[-1] == "boolean" and set(kinds[:-1]) == {"attention"}
    assert html.index('data-kind="boolean"') < html.index('class="final"')
    pred = re.search(r'data-predicted="(\w+)"', html).group(1)
    prob = float(re.search(r'data-prob="([0-9.]+)"', html).group(1))
    assert pred == ("yes" if prob >= 0.5 else "no")


def test_trace_renders_are_identical(small_run, small_data, tmp_path, capsys):
    ex = exist_example(load_dataset(small_data))
    for name in ("a", "b"):
        run(["trace", "--checkpoint", small_run, "--data", small_data, "--example", ex.id, "--render", "html", "--out", tmp_path / name], capsys)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_trace_unknown_example(small_run, small_data, capsys):
    assert run(["trace", "--checkpoint", small_run, "--data", small_data, "--example", "test-999999"], capsys)[0] == 2
    assert run(["trace", "--checkpoint", small_run, "--data", small_data], capsys)[0] == 1


def test_gradcheck_passes(capsys):
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 0
    assert out.strip().splitlines()[-1] == "PASS"
    assert "3-step program / mixed provenance" in out


def test_gradcheck_without_detach_fails(capsys):
    code, out, _ = run(["gradcheck", "--no-detach"], capsys)
    assert code == 3
    assert re.search(r"FAIL gradient cut", out)


def test_gradcheck_single_precision(capsys):
    code, out, _ = run(["gradcheck", "--float32"], capsys)
    assert code == 0
    assert "max_rel_err" in out
