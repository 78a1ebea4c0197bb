"""End-to-end command behavior: exit codes, files, and printed contracts."""

import hashlib
import os

import numpy as np
import pytest

from statetrack.checkpoint import load_checkpoint
from statetrack.cli import main
from statetrack.config import config_text, parse_config
from statetrack.synthgen import SceneSpec, export_sequence, gen_sequence
from statetrack.trackpipe import build_model

MICRO_CFG = os.path.join(os.path.dirname(__file__), "..", "configs", "micro.cfg")


def write_micro_cfg(tmp_path, **overrides):
    cfg = parse_config(open(MICRO_CFG, encoding="utf-8").read())
    cfg.update(overrides)
    path = tmp_path / "micro.cfg"
    path.write_text(config_text(cfg), encoding="utf-8")
    return str(path)


def export_scene(tmp_path, name="seq", seed=11, frames=8):
    seq_dir = tmp_path / name
    fr, boxes = gen_sequence(SceneSpec(seed=seed, frames=frames, canvas=64, speed=2.0))
    export_sequence(str(seq_dir), fr, boxes)
    return str(seq_dir), fr, boxes


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One 2-step micro training run shared by the track/eval tests."""
    root = tmp_path_factory.mktemp("cli_train")
    cfg_path = write_micro_cfg(root, steps=2)
    out = root / "run"
    assert main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    return str(out / "model.ckpt"), root


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_missing_config_creates_nothing(tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["train", "--config", str(tmp_path / "absent.cfg"), "--out", str(out)])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
    assert not out.exists()


def test_train_unknown_config_keys_are_listed(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("zeta=3\nalpha_rate=0.1\n", encoding="utf-8")
    out = tmp_path / "run"
    rc = main(["train", "--config", str(cfg), "--out", str(out)])
    err = capsys.readouterr().err
    assert rc == 1
    assert "zeta" in err and "alpha_rate" in err
    assert not out.exists()


def test_train_zero_steps_equals_initialization(tmp_path):
    cfg_path = write_micro_cfg(tmp_path)
    out = tmp_path / "run0"
    rc = main(["train", "--config", cfg_path, "--steps", "0", "--out", str(out)])
    assert rc == 0
    tensors, step, echo = load_checkpoint(str(out / "model.ckpt"))
    assert step == 0
    cfg = parse_config(echo)
    assert cfg["steps"] == 0
    fresh = build_model(cfg, seed=cfg["seed"])
    state = dict(fresh.named_parameters(""))
    assert set(tensors) == set(state)
    for name, arr in tensors.items():
        assert np.array_equal(arr, state[name].data), name


def test_train_is_deterministic_per_seed(tmp_path):
    cfg_path = write_micro_cfg(tmp_path, steps=2)
    digests = []
    for run in ("a", "b"):
        out = tmp_path / f"run_{run}"
        assert main(["train", "--config", cfg_path, "--out", str(out)]) == 0
        digests.append(hashlib.sha256((out / "model.ckpt").read_bytes()).hexdigest())
    assert digests[0] == digests[1]
    out = tmp_path / "run_c"
    assert main(["train", "--config", cfg_path, "--seed", "9", "--out", str(out)]) == 0
    other = hashlib.sha256((out / "model.ckpt").read_bytes()).hexdigest()
    assert other != digests[0]


def test_train_writes_step_telemetry(tmp_path):
    cfg_path = write_micro_cfg(tmp_path, steps=2)
    out = tmp_path / "run_log"
    assert main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    lines = [l for l in (out / "train.log").read_text().splitlines() if l.startswith("step=")]
    assert len(lines) == 2
    assert "total=" in lines[0] and "lambda_ssm=4" in lines[0]


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

def test_track_writes_results_trace_and_render(trained, tmp_path):
    ckpt, _ = trained
    seq_dir, frames, _ = export_scene(tmp_path)
    results = tmp_path / "results.txt"
    trace = tmp_path / "trace.txt"
    render = tmp_path / "overlays"
    rc = main([
        "track", "--checkpoint", ckpt, "--sequence", seq_dir,
        "--out", str(results), "--trace", str(trace),
        "--render", str(render), "--interval", "4",
    ])
    assert rc == 0
    lines = results.read_text().splitlines()
    assert len(lines) == len(frames)
    assert lines[0].split()[0] == "0"
    assert all(len(l.split()) == 6 for l in lines)
    tlines = trace.read_text().splitlines()
    assert len(tlines) == len(frames) - 1
    for line in tlines:
        t = int(line.split()[0].split("=")[1])
        mode = line.split()[1].split("=")[1]
        assert mode == ("bidirectional" if t % 4 == 0 else "reason")
    pngs = sorted(os.listdir(render))
    assert pngs == [f"overlay_{t:05d}.png" for t in range(len(frames))]


def test_track_threshold_one_forces_init_history(trained, tmp_path):
    ckpt, _ = trained
    seq_dir, frames, _ = export_scene(tmp_path, name="seq_gate", seed=3)
    trace = tmp_path / "trace_gate.txt"
    rc = main([
        "track", "--checkpoint", ckpt, "--sequence", seq_dir,
        "--out", str(tmp_path / "r.txt"), "--trace", str(trace), "--threshold", "1.0",
    ])
    assert rc == 0
    tlines = trace.read_text().splitlines()
    assert len(tlines) == len(frames) - 1
    assert all(line.endswith("action=gate") for line in tlines)


def test_track_ablate_variant_runs(trained, tmp_path):
    ckpt, _ = trained
    seq_dir, frames, _ = export_scene(tmp_path, name="seq_abl", seed=5, frames=6)
    results = tmp_path / "abl.txt"
    rc = main([
        "track", "--checkpoint", ckpt, "--sequence", seq_dir,
        "--out", str(results), "--ablate", "no-decoder",
    ])
    assert rc == 0
    assert len(results.read_text().splitlines()) == len(frames)


def test_track_corrupt_checkpoint_errors(trained, tmp_path, capsys):
    ckpt, _ = trained
    seq_dir, _, _ = export_scene(tmp_path, name="seq_bad", seed=7, frames=4)
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"JUNK" + bytes(32))
    rc = main(["track", "--checkpoint", str(junk), "--sequence", seq_dir])
    assert rc == 1
    assert "magic" in capsys.readouterr().err
    raw = bytearray(open(ckpt, "rb").read())
    raw[4] = 99  # version field follows the 4-byte magic
    versioned = tmp_path / "version.ckpt"
    versioned.write_bytes(bytes(raw))
    rc = main(["track", "--checkpoint", str(versioned), "--sequence", seq_dir])
    assert rc == 1
    assert "version" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def make_exact_sequence(tmp_path):
    """Boxes whose normalized coords survive the 6-decimal result format."""
    seq_dir = tmp_path / "seq_exact"
    frames, _ = gen_sequence(SceneSpec(seed=9, frames=6, canvas=64, speed=1.0))
    boxes = np.array([[8.0 + 2 * t, 10.0 + t, 18.0, 12.0] for t in range(6)])
    export_sequence(str(seq_dir), frames, boxes)
    lines = [
        f"{t} {(b[0] + b[2] / 2) / 64:.6f} {(b[1] + b[3] / 2) / 64:.6f} "
        f"{b[2] / 64:.6f} {b[3] / 64:.6f} 1.000000"
        for t, b in enumerate(boxes)
    ]
    results = tmp_path / "exact_results.txt"
    results.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(seq_dir), str(results)


def test_eval_perfect_results_reach_auc_one(tmp_path, capsys):
    seq_dir, results = make_exact_sequence(tmp_path)
    rc = main(["eval", "--results", results, "--sequence", seq_dir])
    out = capsys.readouterr().out
    assert rc == 0
    assert "mean_iou=1.0000" in out
    assert "success_auc=1.0000" in out
    assert "precision=1.0000" in out


def test_eval_rejects_length_and_order_mismatches(tmp_path, capsys):
    seq_dir, results = make_exact_sequence(tmp_path)
    lines = open(results, encoding="utf-8").read().splitlines()
    short = tmp_path / "short.txt"
    short.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
    assert main(["eval", "--results", str(short), "--sequence", seq_dir]) == 1
    assert "error:" in capsys.readouterr().err
    swapped = tmp_path / "swapped.txt"
    swapped.write_text("\n".join([lines[1], lines[0]] + lines[2:]) + "\n", encoding="utf-8")
    assert main(["eval", "--results", str(swapped), "--sequence", seq_dir]) == 1
    assert "order" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def test_gradcheck_passes_and_prints_table(capsys):
    rc = main(["gradcheck"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "PASS" in out
    for module in ("numerics", "encoder", "state_codec", "reasoning",
                   "decoder_head", "composite"):
        assert module in out


def test_gradcheck_corrupt_hook_fails_naming_module(capsys):
    rc = main(["gradcheck", "--corrupt", "reasoning"])
    out = capsys.readouterr().out
    assert rc == 1
    assert "FAIL" in out and "reasoning" in out
