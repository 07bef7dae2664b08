import json
import subprocess
import sys

import pytest

from flowfl import cli
from flowfl.dataio import SyntheticMotionConfig, synthesize
from flowfl.learner import DEFAULT_ARCH, Arch, ModelWeights
from flowfl.metrics import read_losses_csv, read_rounds_csv

SMALL = ["--synthetic", "straight-bounce", "--synthetic-duration", "1500", "--arch", "linear",
         "--optimizer", "sgd", "--learning-rate", "0.01"]


def test_defaults():
    cfg, opts = cli.parse_config(["--synthetic", "circle"])
    assert (cfg.robots, cfg.quorum_fraction, cfg.quota, cfg.local_epochs, cfg.variant) == (
        15, 0.2, 20, 1, "flow_fl")
    assert opts == {"sweep": False, "verbose": False}


def test_range_error_is_machine_readable(capsys):
    assert cli.main(["--synthetic", "circle", "--quorum-fraction", "1.5"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and "quorum_fraction" in err["message"]


@pytest.mark.parametrize("argv", [
    ["--synthetic", "circle", "--quota", "0"],
    ["--synthetic", "circle", "--local-epochs", "0"],
    ["--synthetic", "circle", "--loss-probability", "2"],
    ["--synthetic", "flocking"],
    ["--bogus"],
    [],  # no dataset
    ["--trajectory-file", "x.csv"],  # flow_fl needs a comm graph
])
def test_config_errors(argv, capsys):
    assert cli.main(argv) == 2
    assert "error" in json.loads(capsys.readouterr().err)


def test_flags_override_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"quota": 60, "quorum-fraction": 0.6, "synthetic": "waypoint"}))
    cfg, _ = cli.parse_config(["--config", str(f), "--quota", "20"])
    assert cfg.quota == 20 and cfg.quorum_fraction == 0.6 and cfg.synthetic == "waypoint"
    f.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(cli.ConfigError):
        cli.parse_config(["--config", str(f)])


def test_run_writes_parseable_artifacts(tmp_path):
    out = tmp_path / "run"
    assert cli.main(SMALL + ["--out", str(out), "--centralized-baseline",
                             "--inference-model", "per-robot"]) == 0
    names = {p.name for p in out.iterdir()}
    assert names == {"config.json", "rounds.csv", "losses.csv", "metrics.json", "weights.bin",
                     "manifest.json"}
    records = read_rounds_csv(out / "rounds.csv")
    fed, cen = read_losses_csv(out / "losses.csv")
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(records) == metrics["n_rounds"] > 0
    assert fed == [r.federated_validation_loss for r in records]
    assert len([c for c in cen if c is not None]) == len(records)
    assert {"ade", "fde"} <= set(metrics["test"]) and "stopping_round" in metrics
    assert metrics["per_robot"]
    w = ModelWeights.from_bytes(Arch(kind="linear"), (out / "weights.bin").read_bytes())
    assert w.count == Arch(kind="linear").count
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["dataset"]["samples_sha256"]) == 64
    assert json.loads((out / "config.json").read_text())["arch"] == "linear"


def test_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        assert cli.main(SMALL + ["--seed", "3", "--out", str(tmp_path / name)]) == 0
    for art in ("losses.csv", "weights.bin", "rounds.csv", "metrics.json"):
        assert (tmp_path / "a" / art).read_bytes() == (tmp_path / "b" / art).read_bytes()
    ma, mb = (json.loads((tmp_path / n / "manifest.json").read_text()) for n in "ab")
    assert ma["config"].pop("out") != mb["config"].pop("out")
    assert ma == mb


def test_sweep_makes_four_directories(tmp_path):
    assert cli.main(SMALL + ["--variant", "server_fl", "--sweep", "--out", str(tmp_path)]) == 0
    dirs = sorted(p.name for p in tmp_path.iterdir())
    assert dirs == ["qf0.2_quota20", "qf0.2_quota60", "qf0.6_quota20", "qf0.6_quota60"]
    cfg = json.loads((tmp_path / "qf0.6_quota60" / "config.json").read_text())
    assert (cfg["quorum_fraction"], cfg["quota"]) == (0.6, 60)


def test_dataset_files_and_centralized_without_graph(tmp_path):
    traj, graph = synthesize(SyntheticMotionConfig(duration=1500, seed=4)).write(tmp_path)
    common = ["--arch", "linear", "--trajectory-file", str(traj)]
    assert cli.main(common + ["--variant", "centralized", "--epochs", "3",
                              "--out", str(tmp_path / "c")]) == 0
    assert len(read_losses_csv(tmp_path / "c" / "losses.csv")[0]) == 3
    assert cli.main(common + ["--comm-graph-file", str(graph), "--out", str(tmp_path / "f")]) == 0
    manifest = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert len(manifest["dataset"]["comm_graph_sha256"]) == 64
    assert manifest["arch"] != DEFAULT_ARCH.descriptor()


def test_bad_dataset_reports_error(tmp_path, capsys):
    bad = tmp_path / "t.csv"
    bad.write_text("0,1,0,0.0,0.0,0.0\n")
    assert cli.main(["--variant", "server_fl", "--trajectory-file", str(bad),
                     "--out", str(tmp_path / "out")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "DataFormatError"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "flowfl", "--quorum-fraction", "0"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "config"
