import csv
import json
from pathlib import Path

import numpy as np
import pytest
from oracles import two_pass_mean_std

from mdunet.cli import main, resolve_config
from mdunet.data import load_case
from mdunet.network import ConfigError

GOLDEN = Path(__file__).parent / "golden"

TINY = {
    "network": {"num_streams": 2, "base_width": 4, "depth": 2, "input_spatial": [16, 16]},
    "train": {"epochs": 2, "decay_epoch": 1, "lr0": 0.002, "batch_size": 2},
    "seed": 3,
}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root / "train"), "--cases", "3", "--size", "16", "16", "--depth", "2"]) == 0
    assert main(["synth", "--out", str(root / "val"), "--cases", "2", "--size", "16", "16", "--id-offset", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def run(synth, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = write(out / "cfg.json", TINY)
    code = main(["train", "--config", cfg, "--data", str(synth / "train"), "--val", str(synth / "val"), "--out", str(out / "run"), "--quiet"])
    assert code == 0
    return out / "run"


@pytest.mark.parametrize("fusion", ["late", "hyperdense"])
def test_inspect_reproduces_golden_table(tmp_path, capsys, fusion):
    cfg = write(tmp_path / "c.json", {"network": {"num_streams": 4, "fusion": fusion}})
    assert main(["inspect", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    stdout = capsys.readouterr().out
    golden = (GOLDEN / f"layers_{fusion}.txt").read_text(encoding="utf-8")
    assert stdout.startswith(golden)
    assert (tmp_path / "o" / "shapes.txt").read_text(encoding="utf-8") == golden
    assert "Parameters: " in stdout
    assert (tmp_path / "o" / "connectivity.txt").read_text().count(" -> ") > 0


def test_inspect_asymmetric_count_is_lower(tmp_path, capsys):
    counts = {}
    for variant in ("standard", "asymmetric"):
        cfg = write(tmp_path / f"{variant}.json", {"network": {"module_variant": variant}})
        main(["inspect", "--config", cfg])
        counts[variant] = int(capsys.readouterr().out.rsplit("Parameters: ", 1)[1])
    assert counts["asymmetric"] < counts["standard"]


@pytest.mark.parametrize(
    "obj, field",
    [
        ({"network": {"fusion": "mid"}}, "network.fusion"),
        ({"netwrok": {}}, "netwrok"),
        ({"train": {"epochs": 0}}, "train.epochs"),
        ({"seed": "x"}, "seed"),
    ],
)
def test_schema_violations_exit_2_and_name_field(tmp_path, capsys, obj, field):
    cfg = write(tmp_path / "bad.json", obj)
    assert main(["inspect", "--config", cfg]) == 2
    assert field in capsys.readouterr().err


def test_unreadable_config_exits_2(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["inspect", "--config", str(tmp_path / "c.json")]) == 2
    assert main(["inspect", "--config", str(tmp_path / "none.json")]) == 2


def test_env_seed_overrides_config(monkeypatch):
    monkeypatch.setenv("MDU_SEED", "11")
    net, tc, seed = resolve_config(TINY)
    assert seed == net.seed == tc.seed == 11
    monkeypatch.setenv("MDU_SEED", "eleven")
    with pytest.raises(ConfigError):
        resolve_config(TINY)


def test_train_writes_artifacts(run):
    assert {p.name for p in run.iterdir()} >= {"checkpoint.mdtk", "log.csv", "manifest.json", "timing.csv"}
    rows = list(csv.DictReader((run / "log.csv").open()))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert float(rows[1]["lr"]) == pytest.approx(0.0002)
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["network"]["seed"] == 3


def test_manifest_reproduces_run_bitwise(run, synth, tmp_path):
    manifest = json.loads((run / "manifest.json").read_text())
    cfg = write(tmp_path / "m.json", manifest)
    code = main(["train", "--config", cfg, "--data", manifest["data"], "--val", manifest["val"], "--out", str(tmp_path / "again"), "--quiet"])
    assert code == 0
    assert (tmp_path / "again" / "log.csv").read_bytes() == (run / "log.csv").read_bytes()
    assert (tmp_path / "again" / "checkpoint.mdtk").read_bytes() == (run / "checkpoint.mdtk").read_bytes()


def test_train_data_errors_exit_3(synth, tmp_path):
    cfg = write(tmp_path / "c.json", TINY)
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 3
    wide = dict(TINY, network=dict(TINY["network"], num_streams=3))
    cfg = write(tmp_path / "c3.json", wide)
    assert main(["train", "--config", cfg, "--data", str(synth / "train"), "--out", str(tmp_path / "o")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_4(synth, tmp_path, capsys):
    hot = dict(TINY, train=dict(TINY["train"], lr0=1e300, epochs=3, decay_epoch=3))
    cfg = write(tmp_path / "c.json", hot)
    assert main(["train", "--config", cfg, "--data", str(synth / "train"), "--out", str(tmp_path / "o"), "--quiet"]) == 4
    assert "epoch" in capsys.readouterr().err


def test_eval_summary_matches_csv(run, synth, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(run / "checkpoint.mdtk"), "--data", str(synth / "val"), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert [r["case"] for r in rows] == ["case0003", "case0004"]
    dscs = [float(r["dsc"]) for r in rows]
    mean, std = two_pass_mean_std(dscs)
    assert f"{mean:.3f} ± {std:.3f}" in capsys.readouterr().out
    # last logged validation DSC came from the same weights
    log = list(csv.DictReader((run / "log.csv").open()))
    assert float(log[-1]["val_dsc"]) == pytest.approx(mean, abs=1e-12)


def test_eval_modality_mismatch_exits_3(run, tmp_path):
    main(["synth", "--out", str(tmp_path / "three"), "--cases", "1", "--size", "16", "16", "--modalities", "3"])
    assert main(["eval", "--checkpoint", str(run / "checkpoint.mdtk"), "--data", str(tmp_path / "three")]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.mdtk"), "--data", str(tmp_path / "three")]) == 3


def test_predict_writes_masks_and_pgm(run, synth, tmp_path):
    assert main(["predict", "--checkpoint", str(run / "checkpoint.mdtk"), "--data", str(synth / "val"), "--out", str(tmp_path), "--pgm"]) == 0
    case = load_case(tmp_path / "case0003_pred.mdt")
    assert case.modalities == () and case.mask.shape == (1, 16, 16)
    pgm = (tmp_path / "case0003_s000.pgm").read_bytes()
    assert pgm.startswith(b"P5\n16 16\n255\n") and len(pgm) == len(b"P5\n16 16\n255\n") + 256
    pixels = np.frombuffer(pgm[-256:], np.uint8)
    assert set(np.unique(pixels)) <= {0, 255}
    np.testing.assert_array_equal(pixels.reshape(16, 16) // 255, case.mask[0])


def test_gradcheck_commands(capsys):
    assert main(["gradcheck", "--op", "conv2d", "--op", "softmax", "--instances", "3"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 2 and all(line.startswith("PASS") for line in out)
    assert main(["gradcheck", "--op", "fft"]) == 2
