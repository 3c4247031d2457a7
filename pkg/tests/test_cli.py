import json

import numpy as np
import pytest

from graphssl.cli import build_parser, main, read_config
from graphssl.data import load_dataset
from graphssl.graph import load_graph, sigma_candidates, knn_graph
from graphssl.model import load_checkpoint
from graphssl.partition import load_partition


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--spec", "rings", "--n", "600", "--classes", "2", "--seed", "7",
                 "--noise", "0.2", "--dim", "4", "--test-fraction", "0.2",
                 "--test-output", str(d / "test.bin"), "-o", str(d / "ds.bin")]) == 0
    assert main(["build-graph", "--k", "10", "--sigma-index", "3", "-i", str(d / "ds.bin"),
                 "-o", str(d / "g.bin")]) == 0
    return d


def manifest(path):
    return json.loads((path.parent / f"{path.name}.manifest.json").read_text())


def test_gen_data_outputs(workdir):
    ds = load_dataset(workdir / "ds.bin")
    assert (ds.n, ds.class_count) == (480, 2)
    m = manifest(workdir / "ds.bin")
    assert m["subcommand"] == "gen-data"
    assert m["seeds"] == {"seed": 7}
    assert m["config"]["n"] == 600
    assert {"tool_version", "wall_time", "inputs", "outputs"} <= set(m)


def test_gen_data_reproducible(workdir, tmp_path):
    args = ["gen-data", "--spec", "rings", "--n", "600", "--classes", "2", "--seed", "7", "--noise", "0.2",
            "--dim", "4", "--test-fraction", "0.2", "--test-output", str(tmp_path / "t.bin"),
            "-o", str(tmp_path / "d.bin")]
    assert main(args) == 0
    assert (tmp_path / "d.bin").read_bytes() == (workdir / "ds.bin").read_bytes()


def test_build_graph_uses_sigma_index(workdir):
    # the binary graph format has no sigma field; the manifest records it
    ds = load_dataset(workdir / "ds.bin")
    expected = sigma_candidates(knn_graph(ds.features, 10), 3)[2]
    m = manifest(workdir / "g.bin")
    assert m["results"]["sigma"] == pytest.approx(expected)
    assert len(m["results"]["sigma_candidates"]) == 5
    g = load_graph(workdir / "g.bin")
    assert g.n == ds.n and g.weights.max() <= 1.0


def test_partition_and_batches(workdir):
    out = workdir / "p.txt"
    assert main(["partition", "-g", str(workdir / "g.bin"), "--parts", "6", "-o", str(out)]) == 0
    p = load_partition(out)
    assert p.n == 480 and p.part_sizes.max() <= np.ceil(1.05 * 480 / 6)
    csv_path = workdir / "b.csv"
    assert main(["batches", "-g", str(workdir / "g.bin"), "-i", str(workdir / "ds.bin"), "--batch-size", "80",
                 "--blocks-per-batch", "2", "-o", str(csv_path)]) == 0
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "batch_id,size,connectivity,entropy,neighbor_count"
    sizes = [int(r.split(",")[1]) for r in rows[1:]]
    assert sum(sizes) == 480


def test_train_eval_and_determinism(workdir):
    common = ["-i", str(workdir / "ds.bin"), "-g", str(workdir / "g.bin"), "--test", str(workdir / "test.bin"),
              "--strategy", "meta", "--sgr", "--gamma", "1", "--epochs", "4", "--batch-size", "80",
              "--label-ratio", "0.1", "--dropout", "0.1", "--lr", "0.05", "--seed", "3"]
    assert main(["train", *common, "-o", str(workdir / "r1")]) == 0
    assert main(["train", *common, "-o", str(workdir / "r2")]) == 0
    for ext in (".csv", ".json", ".model"):
        assert (workdir / f"r1{ext}").read_bytes() == (workdir / f"r2{ext}").read_bytes()
    m = manifest(workdir / "r1")
    assert m["seeds"] == {"data_seed": 3, "batch_seed": 3, "dropout_seed": 3, "init_seed": 3}
    out = workdir / "ev.json"
    assert main(["eval", "-m", str(workdir / "r1.model"), "-i", str(workdir / "test.bin"), "-o", str(out)]) == 0
    acc = json.loads(out.read_text())["accuracy"]
    assert acc == json.loads((workdir / "r1.json").read_text())["test_accuracy"]


def test_fixed_prior_second_pass(workdir):
    base = ["-i", str(workdir / "ds.bin"), "-g", str(workdir / "g.bin"), "--epochs", "2", "--batch-size", "80"]
    assert main(["train", *base, "-o", str(workdir / "first")]) == 0
    assert main(["train", *base, "--kappa", "0.5", "--reg-target", "fixed_prior",
                 "--prior-model", str(workdir / "first.model"), "-o", str(workdir / "second")]) == 0
    assert main(["train", *base, "--reg-target", "fixed_prior", "-o", str(workdir / "bad")]) == 1


def test_config_precedence(workdir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# training knobs\ngamma = 2.5\nepochs = 3  # short\nsgr = false\nbatch-size = 80\n")
    assert read_config(cfg) == {"gamma": "2.5", "epochs": "3", "sgr": "false", "batch_size": "80"}
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "-i", str(workdir / "ds.bin"), "-g", str(workdir / "g.bin"),
                 "--epochs", "2", "-o", str(out)]) == 0
    conf = manifest(out)["config"]
    assert conf["gamma"] == 2.5 and conf["epochs"] == 2 and conf["sgr"] is False
    assert len(json.loads(json.dumps(conf))) > 5


def test_config_unknown_key(workdir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("nonsense = 1\n")
    assert main(["train", "--config", str(cfg), "-i", str(workdir / "ds.bin"), "-g", str(workdir / "g.bin"),
                 "-o", str(tmp_path / "x")]) == 1


def test_exit_codes(workdir, tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert main(["train", "--no-such-flag"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["train", "-i", str(tmp_path / "missing.bin"), "-g", str(workdir / "g.bin"),
                 "-o", str(tmp_path / "x")]) == 2
    assert main(["gen-data", "--n", "5", "--classes", "2", "-o", str(tmp_path / "d.bin")]) == 2
    assert main(["partition", "-g", str(workdir / "g.bin"), "--parts", "100000", "-o", str(tmp_path / "p")]) == 2


def test_divergence_exit_code(workdir, tmp_path):
    out = tmp_path / "div"
    code = main(["train", "-i", str(workdir / "ds.bin"), "-g", str(workdir / "g.bin"), "--lr", "1e300",
                 "--strategy", "shuffled", "-o", str(out)])
    assert code == 3
    params, state = load_checkpoint(f"{out}.diverged.model")
    assert all(np.isfinite(a).all() for a in params.arrays())
    assert "diverged_at_epoch" in manifest(out)["results"]


def test_sweep(workdir, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"strategy": ["meta", "shuffled"], "label_ratio": [0.1], "epochs": 2}))
    out = tmp_path / "sw"
    args = ["sweep", "--grid", str(grid), "-i", str(workdir / "ds.bin"), "-g", str(workdir / "g.bin"),
            "--batch-size", "80", "--out-dir", str(out)]
    assert main(args) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("0,2,0.1,meta,")
    assert (out / "cell_0001_report.csv").exists()
    grid.write_text(json.dumps({"bogus": [1]}))
    assert main(args) == 2


def test_help_lists_defaults():
    parser = build_parser()
    for name, p in parser._subparsers._group_actions[0].choices.items():
        flags = [a for a in p._actions if a.dest != "help"]
        assert all(a.help for a in flags), name
        # every flag, required ones included, shows its default
        text = " ".join(p.format_help().split())
        assert text.count("(default:") == len(flags), name
