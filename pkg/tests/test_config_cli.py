import csv
import io

import pytest

from automl_bench.cli import RUNLOG_NAME, main
from automl_bench.config import (BenchmarkConfig, apply_env, dumps_config, load_config, loads_config)
from automl_bench.errors import ConfigParseError, FixedFieldOverride, RangeError
from automl_bench.graph import build_resnet50, load
from automl_bench.opcount import IMAGENET
from automl_bench.runlog import RunLog

SMALL_RUN = """\
[cluster]
replica_count = 2
run_budget_seconds = 10800
rng_seed = 11
"""


def test_minimal_config_defaults():
    cfg = loads_config("[cluster]\nreplica_count = 2\n")
    assert cfg.cluster.replica_count == 2
    assert cfg.hyperparams.batch_size == 448 and cfg.hyperparams.kernel_size == 3
    assert cfg.cluster.max_epoch == 60 and cfg.cluster.patience == 5
    assert cfg.dataset == IMAGENET and not cfg.nonstandard
    assert cfg.max_error == 0.30 and cfg.min_precision_bits == 16
    assert cfg.executor == "simulated"


def test_small_dataset_is_nonstandard():
    cfg = loads_config("[dataset]\ntrain_images = 10\nval_images = 10\n")
    assert cfg.nonstandard
    assert cfg.to_dict()["dataset"]["nonstandard"] is True


@pytest.mark.parametrize("text", [
    "[benchmark]\nmax_error = 0.5\n",
    "[benchmark]\nmin_precision_bits = 8\n",
    "[benchmark]\nseed_architecture = vgg16\n",
])
def test_fixed_fields_rejected(text):
    with pytest.raises(FixedFieldOverride):
        loads_config(text)


def test_restating_fixed_value_is_fine():
    assert loads_config("[benchmark]\nmax_error = 0.30\n").max_error == 0.30


@pytest.mark.parametrize("text,exc", [
    ("[cluster\n", ConfigParseError),
    ("[nonsense]\na = 1\n", ConfigParseError),
    ("[cluster]\nbogus = 1\n", ConfigParseError),
    ("[cluster]\nreplica_count = two\n", ConfigParseError),
    ("[cluster]\nreplica_count = 0\n", RangeError),
    ("[hpo]\nbatch_size = 100\n", RangeError),
    ("[executor]\nkind = magic\n", RangeError),
])
def test_bad_configs(text, exc):
    with pytest.raises(exc):
        loads_config(text)


def test_round_trip():
    cfg = loads_config(SMALL_RUN + "[hpo]\nbatch_size = 256\nlearning_rate = 0.05\n"
                       "[executor]\nkind = command\ncommand_template = train {arch_file} --out {out_file}\n")
    again = loads_config(dumps_config(cfg))
    assert again == cfg
    assert loads_config(dumps_config(BenchmarkConfig())) == BenchmarkConfig()


def test_seed_env():
    cfg = loads_config(SMALL_RUN)
    assert apply_env(cfg, {"AIPERF_SEED": "99"}).cluster.rng_seed == 99
    assert apply_env(cfg, {}).cluster.rng_seed == 11
    with pytest.raises(ConfigParseError):
        apply_env(cfg, {"AIPERF_SEED": "x"})


def test_load_config_missing(tmp_path):
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "nope.ini")


# -- CLI ---------------------------------------------------------------------

@pytest.fixture()
def arch(tmp_path):
    path = tmp_path / "resnet50.arch"
    assert main(["seed", "--out", str(path)]) == 0
    return path


def test_count_total(arch, tmp_path, capsys):
    out = tmp_path / "count.csv"
    rc = main(["count", "--arch", str(arch), "--train-images", "1281167", "--val-images", "50000",
               "--image-shape", "224x224x3", "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(out.open()))
    total = rows[-1]
    assert total["layer_class"] == "total"
    assert int(total["total_ops"]) == pytest.approx(2.99e16, rel=0.02)
    capsys.readouterr()
    assert main(["count", "--arch", str(arch), "--train-images", "1281167", "--val-images", "50000",
                 "--image-shape", "224x224x3"]) == 0
    assert capsys.readouterr().out == out.read_text()


def test_count_shape_mismatch(arch):
    assert main(["count", "--arch", str(arch), "--train-images", "1", "--val-images", "1",
                 "--image-shape", "32x32x3"]) == 1


def test_run_twice_identical(tmp_path, monkeypatch):
    monkeypatch.delenv("AIPERF_SEED", raising=False)
    cfg = tmp_path / "run.ini"
    cfg.write_text(SMALL_RUN)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(b)]) == 0
    for name in (RUNLOG_NAME, "score.csv", "summary.txt", "score.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    header = RunLog.read(a / RUNLOG_NAME).header
    assert header["rng_seed"] == 11 and header["cluster"]["replica_count"] == 2
    assert list((a / "buffer").glob("*.arch"))


def test_report_regenerates_identically(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(SMALL_RUN)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["report", "--log", str(tmp_path / "a" / RUNLOG_NAME), "--out", str(tmp_path / "r")]) == 0
    for name in ("score.csv", "summary.txt", "score.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "r" / name).read_bytes(), name


def test_seed_env_changes_run(tmp_path, monkeypatch):
    cfg = tmp_path / "run.ini"
    cfg.write_text(SMALL_RUN)
    monkeypatch.setenv("AIPERF_SEED", "123")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert RunLog.read(tmp_path / "a" / RUNLOG_NAME).header["rng_seed"] == 123


def test_report_empty_log(tmp_path):
    log = tmp_path / "empty.jsonl"
    log.write_text("")
    assert main(["report", "--log", str(log), "--out", str(tmp_path / "r")]) == 1
    assert "valid=false" in (tmp_path / "r" / "summary.txt").read_text()


def test_report_malformed_log(tmp_path):
    log = tmp_path / "bad.jsonl"
    log.write_text("{oops\n")
    assert main(["report", "--log", str(log), "--out", str(tmp_path / "r")]) == 1


def test_morph_cli(arch, tmp_path, capsys):
    out = tmp_path / "m.arch"
    rc = main(["morph", "--arch", str(arch), "--action", "Widen:s2b1.conv2",
               "--action", "DeepenBlock:s3b1.relu3:5", "--out", str(out)])
    assert rc == 0
    g = load(out)
    assert capsys.readouterr().out.strip() == g.digest
    assert len(g.nodes) > len(build_resnet50().nodes)
    assert main(["morph", "--arch", str(arch), "--action", "ChangeKernel:conv1:7", "--out", str(out)]) == 1


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["count", "--arch"]) == 2
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path):
    assert main(["count", "--arch", str(tmp_path / "missing.arch"), "--train-images", "1",
                 "--val-images", "1", "--image-shape", "224x224x3"]) == 2
