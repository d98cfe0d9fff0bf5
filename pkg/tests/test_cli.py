import csv
import json
from pathlib import Path

import numpy as np
import pytest

from flowcal.cli import EXIT_DIVERGED, EXIT_INVALID, EXIT_OK, EXIT_VERIFY, main
from flowcal.correction import LatentCorrection
from flowcal.inference import HIST_HEADER, SWEEP_HEADER, read_pgm
from flowcal.training import load_checkpoint

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


def run(command, out, *extra, config=SMOKE):
    return main([command, "--config", str(config), "--out", str(out), *map(str, extra)])


def write_config(tmp_path, **changes):
    doc = json.loads(SMOKE.read_text())
    for section, values in changes.items():
        doc.setdefault(section, {}).update(values)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> train -> correct on the smoke config, run once per module."""
    out = tmp_path_factory.mktemp("run")
    assert run("gen-data", out) == EXIT_OK
    assert run("train", out, "--data", out / "dataset") == EXIT_OK
    assert run("correct", out, "--checkpoint", out / "train" / "flow.avif") == EXIT_OK
    return out


def test_gen_data_is_idempotent(pipeline, tmp_path):
    assert run("gen-data", tmp_path) == EXIT_OK
    a = (pipeline / "dataset" / "manifest.json").read_text()
    assert a == (tmp_path / "dataset" / "manifest.json").read_text()
    manifest = json.loads(a)
    assert manifest["n_train"] == 24 and manifest["n_val"] == 6
    assert np.load(tmp_path / "dataset" / "train_x.npy").shape == (24, 8, 8)


def test_train_and_correct_are_bit_reproducible(pipeline, tmp_path):
    assert run("train", tmp_path, "--data", pipeline / "dataset") == EXIT_OK
    assert (tmp_path / "train" / "flow.avif").read_bytes() == (pipeline / "train" / "flow.avif").read_bytes()
    assert run("correct", tmp_path, "--checkpoint", tmp_path / "train" / "flow.avif") == EXIT_OK
    assert (tmp_path / "correct" / "correction.lcor").read_bytes() == (pipeline / "correct" / "correction.lcor").read_bytes()
    assert (tmp_path / "correct" / "correction_log.csv").read_text() == (pipeline / "correct" / "correction_log.csv").read_text()


def test_seed_override_changes_outputs(pipeline, tmp_path):
    assert run("correct", tmp_path, "--checkpoint", pipeline / "train" / "flow.avif", "--seed", 77) == EXIT_OK
    assert (tmp_path / "correct" / "correction.lcor").read_bytes() != (pipeline / "correct" / "correction.lcor").read_bytes()
    prov = json.loads((tmp_path / "correct" / "provenance.json").read_text())
    assert set(prov["seeds"].values()) == {77}


def test_training_outputs(pipeline):
    flow = load_checkpoint(pipeline / "train" / "flow.avif")
    assert flow.dim == 64
    with open(pipeline / "train" / "curves.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 2
    prov = json.loads((pipeline / "train" / "provenance.json").read_text())
    assert set(prov) >= {"config_hash", "inputs", "versions", "seeds"}
    assert prov["inputs"]["manifest"]["sha256"]


def test_correction_outputs(pipeline):
    corr = LatentCorrection.load(pipeline / "correct" / "correction.lcor")
    assert corr.dim == 64
    with open(pipeline / "correct" / "correction_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "iteration", "loss"] and len(rows) == 1 + 2 * 2


def test_infer_bundle(pipeline):
    ckpt = pipeline / "train" / "flow.avif"
    assert run("infer", pipeline, "--checkpoint", ckpt) == EXIT_OK
    assert run("infer", pipeline, "--checkpoint", ckpt, "--correction", pipeline / "correct" / "correction.lcor") == EXIT_OK
    for sub in ("infer", "infer-corrected"):
        d = pipeline / sub
        for name in ("mean", "std", "normalized_std", "rtm"):
            img, side = read_pgm(d / f"{name}.pgm")
            ref = np.load(d / f"{name}.npy")
            assert side["shape"] == [8, 8]
            assert np.max(np.abs(img - ref)) <= (ref.max() - ref.min()) / 65535 + 1e-15
        summary = json.loads((d / "summary.json").read_text())
        assert np.isfinite(summary["snr_db"]) and summary["n_samples"] == 40
        with open(d / "histograms.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == HIST_HEADER
        families = {r[4] for r in rows[1:]}
        assert families == ({"amortized", "corrected", "prior"} if sub.endswith("corrected") else {"amortized", "prior"})
        assert len(rows) == 1 + len(families) * 2 * 8
        with open(d / "ci_traces.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 2 * 8
    amort = json.loads((pipeline / "infer-corrected" / "summary.json").read_text())["snr_amortized_db"]
    assert amort == json.loads((pipeline / "infer" / "summary.json").read_text())["snr_db"]


def test_verify_writes_sweep_and_exit_code(pipeline, tmp_path):
    code = run("verify", tmp_path, "--checkpoint", pipeline / "train" / "flow.avif")
    assert code in (EXIT_OK, EXIT_VERIFY)
    with open(tmp_path / "verify" / "sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == SWEEP_HEADER and len(rows) == 1 + 4
    summary = json.loads((tmp_path / "verify" / "summary.json").read_text())
    assert (code == EXIT_OK) == all(c["ok"] for c in summary["checks"].values())


def test_verify_fails_when_threshold_unreachable(pipeline, tmp_path):
    cfg = write_config(tmp_path, sweep={"min_fraction": 1.0}, inference={"n_samples": 2})
    # with two samples per cell the std trend cannot hold in every comparison of a random flow
    code = run("verify", tmp_path, "--checkpoint", pipeline / "train" / "flow.avif", config=cfg)
    summary = json.loads((tmp_path / "verify" / "summary.json").read_text())
    expected = EXIT_OK if all(c["ok"] for c in summary["checks"].values()) else EXIT_VERIFY
    assert code == expected


def test_oracle_check(tmp_path):
    assert run("oracle-check", tmp_path) == EXIT_OK
    report = json.loads((tmp_path / "oracle" / "report.json").read_text())
    assert report["ok"] and len(report["checks"]) == 5


def test_invalid_inputs_exit_2(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochz": 1}}))
    assert run("gen-data", tmp_path, config=bad) == EXIT_INVALID
    assert "epochz" in capsys.readouterr().err
    assert run("train", tmp_path) == EXIT_INVALID
    assert run("correct", tmp_path, "--checkpoint", tmp_path / "nope.avif") == EXIT_INVALID
    junk = tmp_path / "junk.avif"
    junk.write_bytes(b"garbage")
    assert run("infer", tmp_path, "--checkpoint", junk) == EXIT_INVALID
    assert run("gen-data", tmp_path, "--seed", -1) == EXIT_INVALID
    assert run("gen-data", tmp_path, config=tmp_path / "missing.json") == EXIT_INVALID


def test_grid_mismatch_between_config_and_dataset(pipeline, tmp_path):
    cfg = write_config(tmp_path, prior={"nz": 6}, survey={"nz": 6})
    assert run("train", tmp_path, "--data", pipeline / "dataset", config=cfg) == EXIT_INVALID


def test_tampered_dataset_rejected(pipeline, tmp_path):
    import shutil

    shutil.copytree(pipeline / "dataset", tmp_path / "ds")
    x = np.load(tmp_path / "ds" / "train_x.npy")
    x[0, 0, 0] += 1.0
    np.save(tmp_path / "ds" / "train_x.npy", x)
    assert run("train", tmp_path, "--data", tmp_path / "ds") == EXIT_INVALID


def test_correction_divergence_exit_3(pipeline, tmp_path, monkeypatch):
    import flowcal.cli as cli
    from flowcal.correction import CorrectionDiverged

    def diverge(flow, *a, **k):
        raise CorrectionDiverged(7, LatentCorrection(np.ones(flow.dim), np.zeros(flow.dim)))

    monkeypatch.setattr(cli, "train_correction", diverge)
    assert run("correct", tmp_path, "--checkpoint", pipeline / "train" / "flow.avif") == EXIT_DIVERGED
    assert LatentCorrection.load(tmp_path / "correct" / "diverged.lcor").mu[0] == 1.0
    assert not (tmp_path / "correct" / "correction.lcor").exists()


def test_training_divergence_exit_3(pipeline, tmp_path):
    cfg = write_config(tmp_path, train={"jitter": 1e200})
    with np.errstate(all="ignore"):
        code = run("train", tmp_path, "--data", pipeline / "dataset", config=cfg)
    assert code == EXIT_DIVERGED
    assert (tmp_path / "train" / "diverged.avif").exists()
