"""End-to-end command-line runs on micro configurations."""

import hashlib
import json

import pytest

from streamfuse.cli import dispatch
from streamfuse.config import ExperimentConfig, SynthConfig, serialize_config
from streamfuse.network import default_config
from streamfuse.training import desk_config


def _micro_config_file(tmp_path, **train_overrides):
    train_kw = dict(epochs=2, steps_per_epoch=2, train_seq_len=3, test_seq_len=3)
    train_kw.update(train_overrides)
    cfg = ExperimentConfig(
        synth=SynthConfig(num_ids=4, cams=2, frames_per_seq=4, extent=12),
        network=default_config("baseline", conv_channels=(4, 6), kernel_size=3,
                               embedding_dim=6, rnn_hidden=5, fusion_layer=1),
        train=desk_config(**train_kw),
    )
    path = tmp_path / "micro.cfg"
    path.write_text(serialize_config(cfg))
    return path


def _sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_synth_writes_frames_and_manifest(tmp_path):
    out = tmp_path / "data"
    code = dispatch(["synth", "--ids", "3", "--cams", "2", "--frames", "3",
                     "--extent", "12", "--out", str(out)])
    assert code == 0
    first = out / "person_000" / "cam_0" / "0000.png"
    assert first.exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["verb"] == "synth"
    rel = str(first.relative_to(out))
    stored = manifest["artifacts"].get(rel) or manifest["artifacts"].get(first.name)
    assert stored == _sha256(first)


def test_train_eval_pipeline(tmp_path):
    cfg_path = _micro_config_file(tmp_path)
    run = tmp_path / "run"
    code = dispatch(["train", "--config", str(cfg_path), "--out", str(run),
                     "--seed", "0"])
    assert code == 0
    assert (run / "loss.csv").exists()
    assert (run / "checkpoint.npz").exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["artifacts"]["loss.csv"] == _sha256(run / "loss.csv")
    assert manifest["config"]["train.epochs"] == "2"

    ev = tmp_path / "ev"
    code = dispatch(["eval", "--config", str(cfg_path), "--out", str(ev),
                     "--seed", "0", "--checkpoint", str(run / "checkpoint.npz")])
    assert code == 0
    lines = (ev / "cmc.csv").read_text().strip().split("\n")
    assert lines[0] == "rank,rate"
    assert lines[-1].split(",")[1] == "1"
    assert (ev / "cmc.svg").read_text().lstrip().startswith("<svg")


def test_epochs_shortcut_overrides_config(tmp_path):
    cfg_path = _micro_config_file(tmp_path)
    run = tmp_path / "run"
    code = dispatch(["train", "--config", str(cfg_path), "--out", str(run),
                     "--epochs", "1"])
    assert code == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["train.epochs"] == "1"
    rows = (run / "loss.csv").read_text().strip().split("\n")
    assert len(rows) == 1 + 2  # header plus one epoch of two steps


def test_train_on_exported_dataset(tmp_path):
    data = tmp_path / "data"
    assert dispatch(["synth", "--ids", "4", "--cams", "2", "--frames", "4",
                     "--extent", "12", "--out", str(data)]) == 0
    cfg_path = _micro_config_file(tmp_path)
    run = tmp_path / "run"
    code = dispatch(["train", "--config", str(cfg_path), "--data", str(data),
                     "--out", str(run)])
    assert code == 0
    assert (run / "checkpoint.npz").exists()


def test_csv_outputs_byte_identical_across_runs(tmp_path):
    cfg_path = _micro_config_file(tmp_path)
    runs = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert dispatch(["train", "--config", str(cfg_path), "--out", str(run),
                         "--seed", "3"]) == 0
        ev = tmp_path / (name + "_eval")
        assert dispatch(["eval", "--config", str(cfg_path), "--out", str(ev),
                         "--seed", "3",
                         "--checkpoint", str(run / "checkpoint.npz")]) == 0
        runs.append((run, ev))
    (run_a, ev_a), (run_b, ev_b) = runs
    assert (run_a / "loss.csv").read_bytes() == (run_b / "loss.csv").read_bytes()
    assert (ev_a / "cmc.csv").read_bytes() == (ev_b / "cmc.csv").read_bytes()


def test_ablate_fusion_method_report(tmp_path):
    cfg_path = _micro_config_file(tmp_path, epochs=1, steps_per_epoch=1)
    out = tmp_path / "grid"
    code = dispatch(["ablate", "fusion_method", "--config", str(cfg_path),
                     "--out", str(out), "--seeds", "1"])
    assert code == 0
    lines = (out / "report.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + 5
    payload = json.loads((out / "report.json").read_text())
    assert len(payload["cells"]) == 5
    assert (out / "rank1.svg").exists()
    assert (out / "curves.svg").exists()


def test_ablate_respects_thread_env(tmp_path, monkeypatch):
    cfg_path = _micro_config_file(tmp_path, epochs=1, steps_per_epoch=1)
    serial = tmp_path / "serial"
    threaded = tmp_path / "threaded"
    monkeypatch.delenv("TSCN_THREADS", raising=False)
    assert dispatch(["ablate", "fusion_layer", "--config", str(cfg_path),
                     "--out", str(serial), "--seeds", "1"]) == 0
    monkeypatch.setenv("TSCN_THREADS", "2")
    assert dispatch(["ablate", "fusion_layer", "--config", str(cfg_path),
                     "--out", str(threaded), "--seeds", "1"]) == 0
    assert (serial / "report.csv").read_bytes() == (threaded / "report.csv").read_bytes()


def test_bad_thread_env_is_config_error(tmp_path, monkeypatch):
    cfg_path = _micro_config_file(tmp_path, epochs=1, steps_per_epoch=1)
    monkeypatch.setenv("TSCN_THREADS", "many")
    code = dispatch(["ablate", "fusion_layer", "--config", str(cfg_path),
                     "--out", str(tmp_path / "x"), "--seeds", "1"])
    assert code == 1


def test_gradcheck_and_oracle_check_verbs(tmp_path):
    out = tmp_path / "gc"
    assert dispatch(["gradcheck", "--instances", "2", "--out", str(out)]) == 0
    text = (out / "gradcheck.txt").read_text()
    assert "conv2d" in text and "ok" in text
    out2 = tmp_path / "oc"
    assert dispatch(["oracle-check", "--instances", "2", "--out", str(out2)]) == 0
    assert "cmc" in (out2 / "oracle-check.txt").read_text()


def test_missing_config_file_exits_one(tmp_path):
    code = dispatch(["train", "--config", str(tmp_path / "absent.cfg"),
                     "--out", str(tmp_path / "out")])
    assert code == 1


def test_bad_override_exits_one(tmp_path):
    cfg_path = _micro_config_file(tmp_path)
    code = dispatch(["train", "--config", str(cfg_path),
                     "--out", str(tmp_path / "out"),
                     "--override", "train.epochs=soon"])
    assert code == 1


def test_unknown_verb_exits_two():
    with pytest.raises(SystemExit) as err:
        dispatch(["transmogrify"])
    assert err.value.code == 2


def test_preset_config_names_resolve(tmp_path):
    # presets select an architecture; shrink everything else for speed
    run = tmp_path / "run"
    code = dispatch([
        "train", "--config", "two_stream_multiscale", "--out", str(run),
        "--epochs", "1",
        "--override", "synth.num_ids=4", "--override", "synth.frames_per_seq=3",
        "--override", "synth.extent=16",
        "--override", "network.conv_channels=4,6",
        "--override", "network.kernel_size=3",
        "--override", "network.embedding_dim=6",
        "--override", "network.rnn_hidden=5",
        "--override", "network.fusion_layer=1",
        "--override", "train.steps_per_epoch=1",
        "--override", "train.train_seq_len=2",
    ])
    assert code == 0
