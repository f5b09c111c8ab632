import re

import numpy as np
import pytest

from cliflow import ARTIFACTS, TINY_CONFIG, invoke, run_pipeline
from lana import dataio


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("cli"))


def test_help_exits_zero():
    code, out, _ = invoke("--help")
    assert code == 0 and "usage" in out.lower()


def test_subcommand_help_exits_zero():
    code, out, _ = invoke("train", "--help")
    assert code == 0 and "--no-pma" in out


@pytest.mark.parametrize("argv", [("train", "--bogus"), ("bogus",), ()])
def test_usage_errors_exit_two(argv):
    code, _, err = invoke(*argv)
    assert code == 2 and "usage" in err.lower()


def test_bad_override_is_a_usage_error(tmp_path):
    code, _, err = invoke("simgen", "--out", tmp_path, "--set", "no_such_key=1")
    assert code == 2 and "no_such_key" in err


def test_config_parse_error_names_the_line(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("d_model = 8\nepochs = many\n", encoding="utf-8")
    code, _, err = invoke("simgen", "--config", cfg, "--out", tmp_path)
    assert code == 1 and "line 2" in err and "epochs" in err


def test_missing_data_is_a_runtime_failure(tmp_path):
    code, _, err = invoke("rasch", "--out", tmp_path)
    assert code == 1 and err


def test_finetune_refuses_no_ll(tmp_path):
    code, _, err = invoke("leveled-finetune", "--out", tmp_path, "--no-ll")
    assert code == 2 and "--no-ll" in err


def test_end_to_end_auc_is_a_probability(pipeline):
    out, logs = pipeline
    for command, names in ARTIFACTS.items():
        for name in names:
            assert (out / name).is_file(), (command, name)
    value = float(re.search(r"auc (\d\.\d+)", logs["eval"]).group(1))
    assert 0.0 <= value <= 1.0
    header, row = (out / "eval.csv").read_text().splitlines()
    assert header == "model,k,split,n_predictions,auc"
    assert row.startswith("ensemble,1,valid,")


def test_predictions_cover_every_valid_interaction(pipeline):
    out, _ = pipeline
    records = dataio.parse_interactions(out / "interactions.csv")
    _, valid = dataio.split_by_student(records, 0.2, 7)
    lines = (out / "predictions.csv").read_text().splitlines()
    assert len(lines) - 1 == len(valid)
    probs = np.array([float(line.rsplit(",", 1)[1]) for line in lines[1:]])
    assert np.all((probs > 0) & (probs < 1))


def test_export_features_shape(pipeline):
    out, _ = pipeline
    records = dataio.parse_interactions(out / "interactions.csv")
    _, valid = dataio.split_by_student(records, 0.2, 7)
    n_windows = len(dataio.windows_from_records(valid, 20))
    lines = (out / "features.csv").read_text().splitlines()
    assert len(lines) - 1 == n_windows
    assert all(len(line.split(",")) == 2 + 8 for line in lines)


def test_export_features_twice_is_identical(pipeline):
    out, _ = pipeline
    first = (out / "features.csv").read_bytes()
    code, _, _ = invoke("export-features", "--config", out.parent / "run.cfg", "--out", out, "--seed", 7)
    assert code == 0 and (out / "features.csv").read_bytes() == first


def test_topk_l_equals_full_fusion_and_ckpt_selects_single(pipeline):
    out, _ = pipeline
    cfg = out.parent / "run.cfg"
    base = ("predict", "--config", cfg, "--out", out, "--seed", 7)
    assert invoke(*base, "--topk", 2)[0] == 0
    full = (out / "predictions.csv").read_text()
    assert invoke(*base, "--no-ll")[0] == 0
    single = (out / "predictions.csv").read_text()
    assert invoke(*base, "--ckpt", out / "model.ckpt")[0] == 0
    assert (out / "predictions.csv").read_text() == single
    assert full != single
    assert invoke(*base)[0] == 0  # restore the k=1 file for the other tests


def test_memberships_report(pipeline):
    out, logs = pipeline
    lines = (out / "memberships.csv").read_text().splitlines()
    assert lines[0] == "layer,mu,sigma2,n_windows,mean_membership"
    assert len(lines) == 3
    assert abs(sum(float(line.split(",")[4]) for line in lines[1:]) - 1.0) < 1e-12
    assert "layer 0" in logs["leveled-finetune"]


def test_tiny_config_parses():
    from lana.config import parse_config_text
    assert parse_config_text(TINY_CONFIG)["L"] == 2
