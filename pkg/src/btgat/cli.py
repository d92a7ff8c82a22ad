"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .cluster_eval import METRIC_NAMES, elbow_k, evaluate_internal, hac_cluster, kmeans_cluster
from .config import ConfigError, RunConfig, load_config
from .data import DataError, GridDataset, flatten_2d, ingest_grid, preprocess, to_sequence_tensor, write_grid_container
from .model import CheckpointError, ModelState, embed, load_checkpoint, soft_assign
from .synth import read_labels, score_against_truth, write_labels, write_synth
from .training import DivergenceError, hard_labels, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
COMMANDS = ("preprocess", "elbow", "train", "cluster", "evaluate", "compare", "synth")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return out


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def _load_data(cfg: RunConfig) -> GridDataset:
    _require(cfg, "input")
    try:
        d = ingest_grid(cfg.input, cfg.format or None)
    except OSError as e:
        raise DataError(f"cannot read {cfg.input}: {e}") from None
    return preprocess(d)


def _load_state(cfg: RunConfig, d: GridDataset) -> ModelState:
    _require(cfg, "checkpoint")
    state = load_checkpoint(cfg.checkpoint)
    if tuple(state.input_shape) != d.shape[1:]:
        raise DataError(f"data grid {d.shape[1:]} does not match the checkpoint's {tuple(state.input_shape)}")
    return state


def _read_label_file(path, T: int) -> np.ndarray:
    try:
        labels = read_labels(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read labels {path}: {e}") from None
    if len(labels) != T:
        raise DataError(f"{path}: {len(labels)} labels for {T} time steps")
    if labels.min() < 0:
        raise DataError(f"{path}: labels must be non-negative")
    return labels


def _latent(state: ModelState, d: GridDataset) -> np.ndarray:
    return embed(state, to_sequence_tensor(d, state.config.window_length))


def _truth_lines(cfg: RunConfig, labels: np.ndarray, T: int) -> str:
    if not cfg.truth:
        return ""
    score = score_against_truth(labels, _read_label_file(cfg.truth, T))
    rows = ";".join(",".join(str(int(v)) for v in row) for row in score.confusion)
    return f"ari={score.ari!r}\nconfusion={rows}\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_preprocess(cfg: RunConfig) -> int:
    d = _load_data(cfg)
    out = _out_dir(cfg)
    write_grid_container(d, out / "preprocessed.stgrid")
    raw = ingest_grid(cfg.input, cfg.format or None)
    lines = [
        f"{name} min={lo!r} max={hi!r} missing={int(raw.missing_mask[..., v].sum())}\n"
        for v, (name, lo, hi) in enumerate(raw.variable_ranges())
    ]
    (out / "ranges.txt").write_text("".join(lines))
    sys.stdout.write("".join(lines))
    return EXIT_OK


def cmd_elbow(cfg: RunConfig) -> int:
    d = _load_data(cfg)
    X = _latent(_load_state(cfg, d), d) if cfg.space == "latent" else flatten_2d(d)
    k_max = min(cfg.k_max, len(X) - 1)
    res = elbow_k(X, (cfg.k_min, k_max), seed=cfg.seed)
    out = _out_dir(cfg)
    (out / "elbow_curve.txt").write_text(res.curve_text())
    (out / "elbow.txt").write_text(f"k_star={res.k_star}\nflags={','.join(res.flags)}\n")
    print(f"k_star={res.k_star}")
    return EXIT_OK


def _train(cfg: RunConfig, d: GridDataset, out: Path):
    state, cs, tlog = train(d, cfg.model_config(), cfg.train_config(), out_dir=out)
    tlog.write(out / "train_log.txt")
    write_labels(cs.labels, out / "labels.txt")
    return state, cs, tlog


def cmd_train(cfg: RunConfig) -> int:
    d = _load_data(cfg)
    out = _out_dir(cfg)
    state, cs, tlog = _train(cfg, d, out)
    truth = _truth_lines(cfg, cs.labels, d.T)
    if truth:
        (out / "truth.txt").write_text(truth)
    print(f"steps={state.step} stop={tlog.stop_reason} clusters={np.bincount(cs.labels, minlength=cfg.n_clusters).tolist()}")
    if truth:
        sys.stdout.write(truth)
    return EXIT_OK


def cmd_cluster(cfg: RunConfig) -> int:
    d = _load_data(cfg)
    state = _load_state(cfg, d)
    E = _latent(state, d)
    labels = hard_labels(soft_assign(E, state.centroids, state.config.alpha).data)
    out = _out_dir(cfg)
    write_labels(labels, out / "labels.txt")
    truth = _truth_lines(cfg, labels, d.T)
    if truth:
        (out / "truth.txt").write_text(truth)
        sys.stdout.write(truth)
    print(f"clusters={np.bincount(labels, minlength=state.config.n_clusters).tolist()}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    _require(cfg, "labels")
    d = _load_data(cfg)
    labels = _read_label_file(cfg.labels, d.T)
    X = _latent(_load_state(cfg, d), d) if cfg.space == "latent" else flatten_2d(d)
    k = max(cfg.n_clusters, int(labels.max()) + 1)
    try:
        rep = evaluate_internal(X, labels, cfg.method or Path(cfg.labels).stem, k)
    except ValueError as e:
        raise DataError(str(e)) from None
    rep.provenance = {"input": Path(cfg.input).name, "space": cfg.space}
    out = _out_dir(cfg)
    (out / "metrics.txt").write_text(rep.to_text())
    (out / "metrics.json").write_text(rep.to_json())
    sys.stdout.write(rep.to_text())
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    d = _load_data(cfg)
    out = _out_dir(cfg)
    X = flatten_2d(d)
    k = cfg.n_clusters
    state, cs, _ = _train(cfg, d, out)
    runs = [
        ("B-TGAT", _latent(state, d), cs.labels),
        ("k-means", X, kmeans_cluster(X, k, seed=cfg.seed).labels),
        (f"HAC-{cfg.linkage}", X, hac_cluster(X, k, cfg.linkage).labels),
    ]
    long_rows = ["method\tmetric\tvalue\n"]
    table = ["method\t" + "\t".join(METRIC_NAMES) + "\n"]
    for name, space, labels in runs:
        rep = evaluate_internal(space, labels, name, k)
        rep.provenance = {"input": Path(cfg.input).name, "space": "latent" if name == "B-TGAT" else "raw"}
        slug = name.lower().replace("-", "_")
        (out / f"metrics_{slug}.txt").write_text(rep.to_text())
        write_labels(labels, out / f"labels_{slug}.txt")
        values = rep.metrics()
        long_rows += [f"{name}\t{m}\t{values[m]!r}\n" for m in METRIC_NAMES]
        table.append(name + "\t" + "\t".join(f"{values[m]:.6g}" for m in METRIC_NAMES) + "\n")
        truth = _truth_lines(cfg, labels, d.T)
        if truth:
            (out / f"truth_{slug}.txt").write_text(truth)
    (out / "compare_long.tsv").write_text("".join(long_rows))
    (out / "compare_table.tsv").write_text("".join(table))
    sys.stdout.write("".join(table))
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    spec = cfg.regime_spec()
    out = _out_dir(cfg)
    d, labels = write_synth(spec, out / "synth.stgrid", out / "truth.txt")
    print(f"T={d.T} grid={d.L}x{d.W} n_vars={d.n} regimes={spec.n_regimes} missing={d.n_missing}")
    return EXIT_OK


HANDLERS = {
    "preprocess": cmd_preprocess,
    "elbow": cmd_elbow,
    "train": cmd_train,
    "cluster": cmd_cluster,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btgat", description="Deep temporal clustering of gridded data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        if name != "synth":
            p.add_argument("--input", help="grid-container or CSV file")
            p.add_argument("--format", choices=("grid-container", "csv"))
        if name in ("elbow", "cluster", "evaluate"):
            p.add_argument("--checkpoint")
        if name == "evaluate":
            p.add_argument("--labels")
        if name in ("train", "cluster", "compare"):
            p.add_argument("--truth", help="true labels, one integer per line")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value
    for key in ("seed", "threads", "out", "input", "format", "checkpoint", "labels", "truth"):
        value = getattr(args, key, None)
        if value is not None:
            pairs[key] = str(value)
    return pairs


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        sys.stderr.write("".join(f"# {line}\n" for line in cfg.to_text().splitlines()))
        with threadpool_limits(limits=cfg.threads):
            return HANDLERS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        where = f" (last good parameters in {e.checkpoint})" if e.checkpoint else ""
        print(f"training diverged: {e}{where}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
