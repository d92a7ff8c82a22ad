import json

import numpy as np
import pytest

from btgat.cli import main
from btgat.config import ConfigError, RunConfig, load_config, parse_pairs
from btgat.data import GridDataset, ingest_grid, write_grid_container
from btgat.synth import read_labels

SMALL = ["--set", "channel_capacities=2,2,2,2", "--set", "latent_dim=2", "--set", "bilstm_hidden=2", "--set", "knn_k=1"]
FAST = SMALL + ["--set", "warmup_steps=3", "--set", "max_iters=10", "--set", "update_interval=5"]


def _synth(tmp_path, *extra):
    out = tmp_path / "synth"
    assert main(["synth", "--out", str(out), *extra]) == 0
    return out / "synth.stgrid", out / "truth.txt"


# -- configuration -------------------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlam = 2.5\nchannel_capacities=4,4,4,4\n\nlinkage=average\n")
    cfg = load_config(path, {"seed": "9"})
    assert cfg.lam == 2.5 and cfg.channel_capacities == (4, 4, 4, 4)
    assert cfg.linkage == "average" and cfg.seed == 9
    assert cfg.train_config().lam == 2.5


def test_config_round_trips_through_its_echo():
    cfg = RunConfig().update({"noise_sigma": "0.3", "segment_lengths": "5,6,7"})
    again = RunConfig().update(parse_pairs(cfg.to_text().splitlines(), "echo"))
    assert again.to_text() == cfg.to_text()


@pytest.mark.parametrize(
    "pairs",
    [{"bogus": "1"}, {"lam": "abc"}, {"lam": "-1"}, {"space": "nope"}, {"threads": "0"}],
)
def test_bad_config_raises(pairs):
    with pytest.raises(ConfigError):
        RunConfig().update(pairs).validate()


def test_unknown_key_exits_2(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "bogus=1"]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_input_exits_2(tmp_path):
    assert main(["preprocess", "--out", str(tmp_path)]) == 2


def test_bad_data_exits_3(tmp_path):
    bad = tmp_path / "bad.stgrid"
    bad.write_bytes(b"magic=STGRID1 T=2 L=1 W=1 n=1\n" + bytes(8))
    assert main(["preprocess", "--input", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert main(["preprocess", "--input", str(tmp_path / "absent.stgrid"), "--out", str(tmp_path / "o")]) == 3


def test_missing_checkpoint_exits_3(tmp_path):
    grid, _ = _synth(tmp_path)
    assert main(["cluster", "--input", str(grid), "--checkpoint", str(tmp_path / "none.bin"), "--out", str(tmp_path)]) == 3


def test_divergence_exits_4(tmp_path, capsys):
    grid, _ = _synth(tmp_path, "--set", "grid=8,8", "--set", "segment_lengths=4,4,4")
    code = main(
        ["train", "--input", str(grid), "--out", str(tmp_path / "t"), *FAST, "--set", "window_length=4",
         "--set", "eta=1e300", "--set", "grad_clip=0"]
    )
    assert code == 4
    assert "diverged" in capsys.readouterr().err
    assert (tmp_path / "t" / "checkpoint.bin").exists()


def test_config_echo_on_stderr_and_disk(tmp_path, capsys):
    _synth(tmp_path, "--seed", "4")
    err = capsys.readouterr().err
    assert "# seed=4\n" in err
    echo = (tmp_path / "synth" / "config.txt").read_text()
    assert "seed=4\n" in echo and "out=" not in echo


def test_rerun_from_echo_reproduces_outputs(tmp_path):
    grid, _ = _synth(tmp_path, "--seed", "6", "--set", "grid=6,6")
    again = tmp_path / "again"
    assert main(["synth", "--config", str(tmp_path / "synth" / "config.txt"), "--out", str(again)]) == 0
    assert (again / "synth.stgrid").read_bytes() == grid.read_bytes()


# -- commands -----------------------------------------------------------------------------


def test_preprocess_reports_ranges_and_is_idempotent(tmp_path, capsys):
    values = np.stack([np.linspace(0, 5, 6), np.linspace(-1, 1, 6)], axis=-1).reshape(6, 1, 1, 2)
    src = tmp_path / "g.stgrid"
    write_grid_container(GridDataset(values, ["a", "b"]), src)
    assert main(["preprocess", "--input", str(src), "--out", str(tmp_path / "p1")]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "a min=0.0 max=5.0 missing=0"
    first = tmp_path / "p1" / "preprocessed.stgrid"
    assert main(["preprocess", "--input", str(first), "--out", str(tmp_path / "p2")]) == 0
    assert (tmp_path / "p2" / "preprocessed.stgrid").read_bytes() == first.read_bytes()


def test_preprocess_prints_one_line_per_variable(tmp_path, capsys):
    src = tmp_path / "g.stgrid"
    values = np.random.default_rng(0).normal(size=(3, 4, 4, 7))
    write_grid_container(GridDataset(values, [f"v{i}" for i in range(7)]), src)
    assert main(["preprocess", "--input", str(src), "--out", str(tmp_path / "p")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 7


def test_evaluate_truth_on_noiseless_synth(tmp_path):
    grid, truth = _synth(tmp_path, "--set", "noise_sigma=0")
    out = tmp_path / "eval"
    assert main(["evaluate", "--input", str(grid), "--labels", str(truth), "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["silhouette"] > 0.9
    assert (out / "metrics.txt").read_text().startswith("method=truth\nk=3\n")


def test_evaluate_rejects_wrong_label_count(tmp_path):
    grid, _ = _synth(tmp_path)
    short = tmp_path / "short.txt"
    short.write_text("0\n1\n")
    assert main(["evaluate", "--input", str(grid), "--labels", str(short), "--out", str(tmp_path / "e")]) == 3


def test_elbow_on_three_regimes(tmp_path, capsys):
    grid, _ = _synth(tmp_path)
    out = tmp_path / "elbow"
    assert main(["elbow", "--input", str(grid), "--out", str(out)]) == 0
    assert "k_star=3" in capsys.readouterr().out
    curve = (out / "elbow_curve.txt").read_text().splitlines()
    assert [int(line.split()[0]) for line in curve] == list(range(2, 11))


def test_train_then_cluster(tmp_path):
    grid, truth = _synth(tmp_path, "--set", "grid=8,8")
    t = tmp_path / "train"
    assert main(["train", "--input", str(grid), "--truth", str(truth), "--out", str(t), *FAST]) == 0
    for name in ("checkpoint.bin", "train_log.txt", "labels.txt", "truth.txt", "config.txt"):
        assert (t / name).exists(), name
    assert len(read_labels(t / "labels.txt")) == 120
    c = tmp_path / "cluster"
    assert main(["cluster", "--input", str(grid), "--checkpoint", str(t / "checkpoint.bin"), "--out", str(c)]) == 0
    assert np.array_equal(read_labels(c / "labels.txt"), read_labels(t / "labels.txt"))
    # a grid of another shape cannot be scored with this checkpoint
    other, _ = _synth(tmp_path / "x", "--set", "grid=6,6")
    assert main(["cluster", "--input", str(other), "--checkpoint", str(t / "checkpoint.bin"), "--out", str(c)]) == 3


def test_compare_table_shape(tmp_path):
    grid, truth = _synth(tmp_path, "--set", "grid=8,8")
    out = tmp_path / "cmp"
    assert main(["compare", "--input", str(grid), "--truth", str(truth), "--out", str(out), *FAST]) == 0
    table = [line.split("\t") for line in (out / "compare_table.tsv").read_text().splitlines()]
    assert len(table) == 4 and all(len(row) == 7 for row in table)
    assert [row[0] for row in table[1:]] == ["B-TGAT", "k-means", "HAC-ward"]
    long_rows = (out / "compare_long.tsv").read_text().splitlines()
    assert len(long_rows) == 1 + 3 * 6
    assert ingest_grid(grid).T == 120
