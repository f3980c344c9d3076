import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from conftest import REPO
from bytestack import cli
from bytestack.config import PAD_ID
from bytestack.data.vqa import VqaRecord, read_shard, write_vqa_jsonl

sys.path.insert(0, str(REPO / "scripts"))
import context_gains  # noqa: E402

TINY = """
[model]
allow_p1_extension = {ext}

[[model.stages]]
kind = "transformer"
patch_size = 4
width = 16
heads = 2

[[model.stages]]
kind = "selective_ssm"
patch_size = 4
width = 8
state_size = 4

[train]
peak_lr = 0.003
total_steps = 6
micro_batch = 4
eval_every = 3
eval_batches = 2
seed = 0

[data]
kind = "corpus"
train = "{corpus}"
val = "{corpus}"
test = "{corpus}"
"""


@pytest.fixture
def tiny(tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "a.txt").write_bytes(b"Whenever I find myself growing grim about the mouth; " * 20)
    path = tmp_path / "tiny.toml"
    path.write_text(TINY.format(corpus=corpus, ext="false"))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def log_lines(path, kind="train"):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    return [r for r in rows if r["kind"] == kind]


def test_missing_corpus_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(TINY.format(corpus=tmp_path / "nowhere", ext="false"))
    assert run("train", "--config", cfg, "--out", tmp_path / "run") == 2
    err = capsys.readouterr().err
    assert err == "data: corpus path not found\n"


def test_bad_override_is_one_line(tiny, tmp_path, capsys):
    assert run("train", "--config", tiny, "--override", "train.total_steps=many", "--out", tmp_path / "r") == 2
    err = capsys.readouterr().err.strip()
    assert err and "\n" not in err
    assert not (tmp_path / "r").exists()


def test_single_step_override(tiny, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", tiny, "--override", "train.total_steps=1", "--out", out) == 0
    assert [r["step"] for r in log_lines(out / "train_log.jsonl")] == [1]
    assert torch.load(out / "checkpoints" / "last.pt", weights_only=False)["step"] == 1
    report = json.loads((out / "eval.jsonl").read_text())
    assert report["split"] == "test" and report["step"] == 1


def test_train_artifacts(tiny, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", tiny, "--out", out) == 0
    names = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert names == ["best.pt", "last.pt"]
    assert (out / "config.toml").exists()
    assert len(log_lines(out / "train_log.jsonl", "eval")) == 2


def test_train_reproducible(tiny, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--config", tiny, "--out", tmp_path / name) == 0
    for kind in ("train", "eval"):
        a, b = (log_lines(tmp_path / n / "train_log.jsonl", kind) for n in "ab")
        for r in a + b:
            r.get("extra", {}).pop("elapsed_s", None)
        assert a == b
    sa = torch.load(tmp_path / "a" / "checkpoints" / "last.pt", weights_only=False)["model"]
    sb = torch.load(tmp_path / "b" / "checkpoints" / "last.pt", weights_only=False)["model"]
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_seed_flag_changes_run(tiny, tmp_path):
    assert run("train", "--config", tiny, "--out", tmp_path / "a", "--override", "train.total_steps=2") == 0
    assert run("train", "--config", tiny, "--out", tmp_path / "b", "--override", "train.total_steps=2",
               "--seed", 7) == 0
    a, b = (log_lines(tmp_path / n / "train_log.jsonl") for n in "ab")
    assert a[0]["loss"] != b[0]["loss"]
    assert "seed = 7" in (tmp_path / "b" / "config.toml").read_text()


def test_resume_through_cli(tiny, tmp_path):
    straight, split = tmp_path / "s", tmp_path / "p"
    assert run("train", "--config", tiny, "--out", straight) == 0
    assert run("train", "--config", tiny, "--out", split, "--stop-at", 2) == 0
    assert not (split / "eval.jsonl").exists()
    assert run("train", "--config", tiny, "--out", split, "--checkpoint", split / "checkpoints" / "last.pt") == 0
    a = [r["loss"] for r in log_lines(straight / "train_log.jsonl")]
    b = [r["loss"] for r in log_lines(split / "train_log.jsonl")]
    assert len(a) == len(b) == 6
    assert a == pytest.approx(b, abs=1e-5)


def test_dry_run_allocates_nothing(tiny, tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("model built during dry run")
    monkeypatch.setattr(cli, "HierarchicalByteModel", boom)
    assert run("train", "--config", tiny, "--dry-run", "--out", tmp_path / "r") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["L_max"] == 16 and info["patch_sizes"] == [4, 4]
    assert info["K"] == [4, 16]
    assert info["parameters"] > 0 and info["effective_batch"] == 4
    assert not (tmp_path / "r").exists()


@pytest.fixture
def trained(tiny, tmp_path):
    out = tmp_path / "trained"
    assert run("train", "--config", tiny, "--out", out, "--override", "train.total_steps=2") == 0
    return out / "checkpoints" / "last.pt"


def test_eval_one_length_one_line(tiny, trained, tmp_path, capsys):
    assert run("eval", "--config", tiny, "--checkpoint", trained, "--lengths", "16") == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["context_length"] == 16


def test_eval_sweep_and_gains(tmp_path, tiny, trained):
    # the extension switch lets a checkpoint be evaluated beyond its training length
    cfg = tmp_path / "ext.toml"
    cfg.write_text(tiny.read_text().replace("allow_p1_extension = false", "allow_p1_extension = true"))
    out = tmp_path / "sweep.jsonl"
    assert run("eval", "--config", cfg, "--checkpoint", trained, "--lengths", "16,32,64", "--out", out) == 0
    reports = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["context_length"] for r in reports] == [16, 32, 64]
    corpus_bytes = 53 * 20
    assert [r["n_bytes"] for r in reports] == [corpus_bytes // n * n for n in (16, 32, 64)]
    table = context_gains.gains_table(reports)
    assert table[0]["relative_gain"] is None
    for prev, row in zip(table, table[1:]):
        assert row["relative_gain"] == pytest.approx((prev["bpb"] - row["bpb"]) / prev["bpb"])


def test_context_gains_script(tmp_path, capsys):
    path = tmp_path / "r.jsonl"
    path.write_text("\n".join(json.dumps({"context_length": n, "bpb": b}) for n, b in [(64, 3.0), (16, 4.0), (32, 3.5)]))
    assert context_gains.main([str(path), "--json"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["context_length"] for r in rows] == [16, 32, 64]
    assert rows[1]["relative_gain"] == pytest.approx(0.125)
    assert rows[2]["relative_gain"] == pytest.approx(0.5 / 3.5)


def test_eval_mismatch_exit_3(tiny, trained, tmp_path, capsys):
    other = tmp_path / "other.toml"
    other.write_text(tiny.read_text().replace("width = 16", "width = 24"))
    assert run("eval", "--config", other, "--checkpoint", trained) == 3
    assert capsys.readouterr().err.startswith("checkpoint:")


def test_eval_length_beyond_limit(tiny, trained):
    assert run("eval", "--config", tiny, "--checkpoint", trained, "--lengths", "32") == 2


def test_generate_zero_bytes(tiny, trained, tmp_path):
    out = tmp_path / "g.bin"
    assert run("generate", "--config", tiny, "--checkpoint", trained, "--n", 0, "--out", out) == 0
    assert out.read_bytes() == b""


def test_generate_default_length(tiny, trained, tmp_path):
    out = tmp_path / "g.bin"
    assert run("generate", "--config", tiny, "--checkpoint", trained, "--out", out) == 0
    assert len(out.read_bytes()) == 256


def test_generate_greedy_reruns_identical(tiny, trained, tmp_path, capsys):
    prompt = tmp_path / "p.txt"
    prompt.write_bytes(b"Whenever I")
    outs = []
    for i in range(2):
        out = tmp_path / f"g{i}.bin"
        assert run("generate", "--config", tiny, "--checkpoint", trained, "--prompt", prompt,
                   "--n", 12, "--out", out, "--show") == 0
        outs.append(out.read_bytes())
    assert len(outs[0]) == 12 and outs[0] == outs[1]
    assert capsys.readouterr().out.count("\n") == 2


def test_generate_sampling_seeded(tiny, trained, tmp_path):
    outs = []
    for seed in (1, 1, 2):
        out = tmp_path / f"s{len(outs)}.bin"
        assert run("generate", "--config", tiny, "--checkpoint", trained, "--n", 20, "--seed", seed,
                   "--policy", "temperature:1.5", "--out", out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] != outs[2]


def test_generate_rejects_bad_input(tiny, trained, tmp_path):
    assert run("generate", "--config", tiny, "--checkpoint", trained, "--policy", "top-k:0",
               "--out", tmp_path / "x") == 2
    long_prompt = tmp_path / "long.txt"
    long_prompt.write_bytes(b"x" * 16)
    assert run("generate", "--config", tiny, "--prompt", long_prompt, "--out", tmp_path / "y") == 2


def vqa_records(tmp_path):
    rgb = np.array([[[10, 200, 30], [250, 5, 90]], [[0, 0, 0], [255, 255, 255]]], dtype=np.uint8)
    recs = [VqaRecord(b"Is there a red square?", 0, "E", rgb, b"P6\n2 2\n255\n" + rgb.tobytes() + b"\x00trail")]
    return write_vqa_jsonl(recs, tmp_path / "vqa")


def test_serialize_raw_two_by_two(tmp_path):
    src = vqa_records(tmp_path)
    assert run("serialize", "--input", src, "--context", 40, "--image-mode", "raw", "--out", tmp_path / "r.npz") == 0
    sample = read_shard(tmp_path / "r.npz")[0]
    body = sample.inputs
    first = int(np.argmax(body != PAD_ID))
    sep = first + int(np.argmax(body[first:] == PAD_ID))
    assert sep - first == 12
    assert bytes(body[first:sep].astype(np.uint8)) == bytes([10, 200, 30, 250, 5, 90, 0, 0, 0, 255, 255, 255])


def test_serialize_discretized_palette(tmp_path):
    assert run("toy-vqa", "--out", tmp_path / "toy", "--n-train", 30, "--n-val", 1, "--n-test", 1) == 0
    src = tmp_path / "toy" / "train" / "records.jsonl"
    assert run("serialize", "--input", src, "--context", 64, "--image-mode", "discretized:3",
               "--out", tmp_path / "d.npz") == 0
    for sample in read_shard(tmp_path / "d.npz"):
        first = int(np.argmax(sample.inputs != PAD_ID))
        image = sample.inputs[first:first + 27]
        assert len(set(image.tolist())) <= 8


def test_serialize_filestream_hash(tmp_path):
    src = vqa_records(tmp_path)
    stream = (tmp_path / "vqa" / "images" / "000000.ppm").read_bytes()
    context = len(stream) + 40
    assert run("serialize", "--input", src, "--context", context, "--image-mode", "filestream",
               "--out", tmp_path / "f.npz") == 0
    sample = read_shard(tmp_path / "f.npz")[0]
    first = int(np.argmax(sample.inputs != PAD_ID))
    got = bytes(sample.inputs[first:first + len(stream)].astype(np.uint8))
    assert hashlib.sha256(got).hexdigest() == hashlib.sha256(stream).hexdigest()
    assert sample.inputs[first + len(stream)] == PAD_ID


def test_serialize_reports_bad_line(tmp_path, capsys):
    src = vqa_records(tmp_path)
    src.write_text(src.read_text() + '{"question": "x", "answer": "maybe", "question_type": "E"}\n')
    assert run("serialize", "--input", src, "--context", 40, "--out", tmp_path / "x.npz") == 2
    assert "records.jsonl:2:" in capsys.readouterr().err


def test_vqa_training_from_shards(tmp_path):
    assert run("toy-vqa", "--out", tmp_path / "toy", "--n-train", 40, "--n-val", 8, "--n-test", 8) == 0
    for split in ("train", "val", "test"):
        assert run("serialize", "--input", tmp_path / "toy" / split / "records.jsonl", "--context", 64,
                   "--image-mode", "disc", "--out", tmp_path / f"{split}.npz") == 0
    cfg = tmp_path / "vqa.toml"
    cfg.write_text((REPO / "configs" / "vqa_demo.toml").read_text()
                   .replace("../runs/toy_vqa/", "").replace("time_budget_s = 540", "time_budget_s = 0"))
    assert run("train", "--config", cfg, "--out", tmp_path / "run", "--override", "train.total_steps=2",
               "--override", "model.stages.0.width=32", "--override", "model.stages.0.layers=1") == 0
    report = json.loads((tmp_path / "run" / "eval.jsonl").read_text())
    assert report["accuracy"]["counts"] and 0.0 <= report["accuracy"]["overall"] <= 1.0


def test_bench_reports_exponent(tiny, tmp_path):
    out = tmp_path / "bench.jsonl"
    assert run("bench", "--config", tiny, "--lengths", "4,8,16", "--n-bytes", 1, "--repeats", 1, "--out", out) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["context_length"] for r in rows[:3]] == [4, 8, 16]
    assert all(r["seconds_per_byte"] > 0 for r in rows[:3])
    assert isinstance(rows[3]["growth_exponent"], float)


def test_demo_config_end_to_end(tmp_path):
    out = tmp_path / "demo"
    assert run("train", "--config", REPO / "configs" / "demo.toml", "--out", out) == 0
    report = json.loads((out / "eval.jsonl").read_text())
    assert report["split"] == "test" and report["bpb"] < 8.0


def test_module_entry_point(tiny):
    proc = subprocess.run([sys.executable, "-m", "bytestack.cli", "train", "--config", str(tiny), "--dry-run"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["L_max"] == 16
