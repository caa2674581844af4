from __future__ import annotations

import csv

import numpy as np
import pytest

from pcp.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from pcp.data import CohortConfig, generate_synthetic_cohort, load_dataset, patient_split
from pcp.model import load_checkpoint

SMALL = ["--patients", "10", "--frames", "4", "--classes", "2", "--seed", "3"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A small gen + train run shared by the read-only command tests."""
    d = tmp_path_factory.mktemp("run")
    gen = ["gen", "--patients", "20", "--frames", "2", "--classes", "2", "--seed", "3"]
    assert main([*gen, "--out-dir", str(d), "-o", "c.pcpd"]) == EXIT_OK
    args = ["train", "--data", str(d / "c.pcpd"), "--emb", "8", "--epochs", "2", "--out-dir", str(d)]
    assert main(args) == EXIT_OK
    return d


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gen_round_trip_and_determinism(tmp_path):
    assert main(["gen", *SMALL, "--out-dir", str(tmp_path), "-o", "a.pcpd"]) == EXIT_OK
    assert main(["gen", *SMALL, "--out-dir", str(tmp_path), "-o", "b.pcpd"]) == EXIT_OK
    assert (tmp_path / "a.pcpd").read_bytes() == (tmp_path / "b.pcpd").read_bytes()
    expected = generate_synthetic_cohort(CohortConfig(num_patients=10, frames_per_patient=4, num_classes=2, seed=3))
    assert load_dataset(tmp_path / "a.pcpd") == expected


def test_missing_required_flag_is_usage_error(capsys):
    assert main(["train"]) == EXIT_USAGE
    assert "--data is required" in capsys.readouterr().err
    assert main([]) == EXIT_USAGE
    assert main(["gen", "--patients", "many"]) == EXIT_USAGE


def test_invalid_values_are_data_errors(tmp_path):
    assert main(["gen", "--patients", "0", "--out-dir", str(tmp_path)]) == EXIT_DATA
    assert main(["train", "--data", str(tmp_path / "missing.pcpd")]) == EXIT_DATA
    (tmp_path / "bad.pcpd").write_bytes(b"PCPD\x01")
    assert main(["train", "--data", str(tmp_path / "bad.pcpd")]) == EXIT_DATA


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# cohort\npatients = 6\nframes=2\nclasses=2\noutput=x.pcpd\n")
    assert main(["gen", "--config", str(cfg), "--frames", "3", "--out-dir", str(tmp_path)]) == EXIT_OK
    ds = load_dataset(tmp_path / "x.pcpd")
    assert len(ds.patients) == 6 and len(ds) == 18
    cfg.write_text("patients=6\ncolour=blue\n")
    assert main(["gen", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PCP_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["gen", *SMALL, "-o", "e.pcpd"]) == EXIT_OK
    assert (tmp_path / "env" / "e.pcpd").exists()


def test_train_artifacts(run):
    rows = _rows(run / "metrics.csv")
    assert rows[0] == ["epoch", "contrastive_loss", "supervised_loss", "train_auc"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    split = _rows(run / "split.csv")
    assert split[0] == ["patient_id", "split", "label"] and len(split) == 21
    model = load_checkpoint(run / "model.pcpm")
    train = patient_split(load_dataset(run / "c.pcpd"))[0]
    assert np.array_equal(np.sort(model.bank.patient_ids), train.patients)
    assert (run / "metrics.csv").read_text().endswith("\n")


def test_eval(run, tmp_path):
    out = tmp_path / "ev"
    args = ["eval", "--data", str(run / "c.pcpd"), "--checkpoint", str(run / "model.pcpm"), "--out-dir", str(out)]
    assert main(args) == EXIT_OK
    rows = _rows(out / "eval.csv")
    assert rows[0] == ["strategy", "E", "seed", "auc"]
    assert [r[0] for r in rows[1:]] == ["Nearest", "Nearest10", "Mean", "SimilarityWeightedMean"]
    assert all(r[1] == "8" and 0.0 <= float(r[3]) <= 1.0 for r in rows[1:])
    assert main(args + ["--emb", "16"]) == EXIT_DATA


def test_similarity_outputs(run, tmp_path):
    out = tmp_path / "sim"
    args = ["similarity", "--data", str(run / "c.pcpd"), "--checkpoint", str(run / "model.pcpm"), "--out-dir", str(out)]
    assert main(args + ["--checkpoint-b", str(run / "model.pcpm"), "--data-b", str(run / "c.pcpd")]) == EXIT_OK
    for name in ("distances.csv", "patient_matrix.csv", "precision_curve.csv", "pairs.csv", "cross_matrix.csv"):
        assert (out / name).exists()
    counts = [int(r[2]) for r in _rows(out / "precision_curve.csv")[1:]]
    assert counts == sorted(counts) and len(counts) == 20
    code = main(args + ["--require-specific", "1", "--out-dir", str(tmp_path / "s2")])
    assert code in (EXIT_OK, EXIT_NUMERIC)


def test_distill_and_export(run, tmp_path):
    out = tmp_path / "dist"
    base = ["--data", str(run / "c.pcpd"), "--checkpoint", str(run / "model.pcpm"), "--out-dir", str(out)]
    assert main(["distill", *base, "--seeds", "0,1", "--fractions", "0.5,1.0"]) == EXIT_OK
    rows = _rows(out / "distill.csv")
    assert rows[0] == ["method", "space", "fraction", "k", "seed", "auc", "runtime_seconds"]
    assert any(r[0] == "full" for r in rows[1:])
    first = (out / "distill.csv").read_bytes()
    assert main(["distill", *base, "--seeds", "0,1", "--fractions", "0.5,1.0", "--jobs", "2"]) == EXIT_OK
    assert (out / "distill.csv").read_bytes() == first

    assert main(["export-embeddings", *base]) == EXIT_OK
    rows = _rows(out / "embeddings.csv")
    assert rows[0][:4] == ["kind", "patient_id", "label", "e0"] and len(rows[0]) == 3 + 8
    assert len(rows) - 1 == 40 + 12
    model = load_checkpoint(run / "model.pcpm")
    ds = load_dataset(run / "c.pcpd")
    h = model.represent(ds.samples)
    assert np.array_equal(np.array(rows[1][3:], dtype=float), h[0])
