"""Planted-regime synthetic grids with known labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from .data import GridDataset, write_grid_container


@dataclass
class RegimeSpec:
    n_regimes: int = 3
    segment_lengths: list[int] = field(default_factory=lambda: [17, 23, 19, 21, 18, 22])
    grid: tuple[int, int] = (16, 16)
    n_vars: int = 3
    noise_sigma: float = 0.1
    missing_rate: float = 0.0
    seed: int = 0
    level_spread: float = 0.3

    def __post_init__(self):
        if self.n_regimes < 1:
            raise ValueError("n_regimes must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.level_spread < 0:
            raise ValueError("level_spread must be >= 0")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if len(self.segment_lengths) < self.n_regimes or min(self.segment_lengths) < 1:
            raise ValueError("need at least one positive-length segment per regime")

    @property
    def T(self) -> int:
        return int(sum(self.segment_lengths))

    @classmethod
    def acceptance(cls, noise_sigma: float = 0.1, seed: int = 0) -> RegimeSpec:
        """T=120 on a 16x16 grid, 3 variables, 3 regimes recurring in 6 segments.

        Segment boundaries deliberately do not line up with 8-frame windows.
        """
        return cls(3, [17, 23, 19, 21, 18, 22], (16, 16), 3, noise_sigma, 0.0, seed)


def regime_means(spec: RegimeSpec, rng: np.random.Generator) -> np.ndarray:
    """(n_regimes, L, W, n_vars) smooth fields.

    Each field is a regime level plus two low-order 2-D sinusoids.  Levels are
    evenly spaced over ``level_spread`` around 0.5 and shuffled per variable,
    so regimes differ in spatial arrangement and, unless the spread is 0, in
    their area mean.
    """
    L, W = spec.grid
    x = np.arange(L)[:, None] / L
    y = np.arange(W)[None, :] / W
    R = spec.n_regimes
    half = spec.level_spread / 2
    steps = np.linspace(0.5 - half, 0.5 + half, R) if R > 1 else np.array([0.5])
    levels = np.stack([rng.permutation(steps) for _ in range(spec.n_vars)], axis=1)
    out = np.empty((R, L, W, spec.n_vars))
    for r in range(R):
        for v in range(spec.n_vars):
            field_ = np.full((L, W), levels[r, v])
            for _ in range(2):
                fx, fy = rng.integers(0, 3, size=2)
                if fx == 0 and fy == 0:
                    fx = 1
                phase = rng.uniform(0, 2 * np.pi)
                amp = rng.uniform(0.1, 0.2)
                field_ = field_ + amp * np.sin(2 * np.pi * (fx * x + fy * y) + phase)
            out[r, :, :, v] = field_
    return out


def generate(spec: RegimeSpec) -> tuple[GridDataset, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    means = regime_means(spec, rng)
    labels = np.concatenate([np.full(n, i % spec.n_regimes) for i, n in enumerate(spec.segment_lengths)])
    values = means[labels].copy()
    if spec.noise_sigma > 0:
        values += rng.normal(0.0, spec.noise_sigma, size=values.shape)
    mask = np.zeros(values.shape, dtype=bool)
    if spec.missing_rate > 0:
        mask = rng.random(values.shape) < spec.missing_rate
        values[mask] = np.nan
    names = [f"v{i}" for i in range(spec.n_vars)]
    return GridDataset(values, names, mask), labels.astype(np.int64)


def write_synth(spec: RegimeSpec, grid_path, labels_path) -> tuple[GridDataset, np.ndarray]:
    d, labels = generate(spec)
    write_grid_container(d, grid_path)
    write_labels(labels, labels_path)
    return d, labels


def write_labels(labels, path) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def read_labels(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.array([int(v) for v in lines], dtype=np.int64)


def contingency(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("label arrays differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def adjusted_rand_index(labels, true_labels) -> float:
    table = contingency(labels, true_labels)
    n = int(table.sum())
    sum_cells = sum(comb(int(v), 2) for v in table.ravel())
    sum_rows = sum(comb(int(v), 2) for v in table.sum(axis=1))
    sum_cols = sum(comb(int(v), 2) for v in table.sum(axis=0))
    total = comb(n, 2)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


@dataclass
class TruthScore:
    ari: float
    confusion: np.ndarray


def score_against_truth(labels, true_labels) -> TruthScore:
    return TruthScore(adjusted_rand_index(labels, true_labels), contingency(labels, true_labels))
