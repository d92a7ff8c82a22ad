"""Gridded (time, lon, lat, variable) datasets: I/O, imputation, scaling, reshaping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor

logger = logging.getLogger(__name__)

MAGIC = "STGRID1"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class GridDataset:
    values: np.ndarray  # (T, L, W, n)
    var_names: list[str]
    missing_mask: np.ndarray = None
    normalization: list[tuple[float, float]] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise DataError(f"grid values must be 4-D (T, L, W, n), got shape {self.values.shape}")
        if self.missing_mask is None:
            self.missing_mask = np.isnan(self.values)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.missing_mask.shape != self.values.shape:
            raise DataError("missing_mask shape does not match values")
        if len(self.var_names) != self.n:
            raise DataError(f"expected {self.n} variable names, got {len(self.var_names)}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> int:
        return self.values.shape[1]

    @property
    def W(self) -> int:
        return self.values.shape[2]

    @property
    def n(self) -> int:
        return self.values.shape[3]

    @property
    def n_missing(self) -> int:
        return int(self.missing_mask.sum())

    def variable_ranges(self) -> list[tuple[str, float, float]]:
        out = []
        for v, name in enumerate(self.var_names):
            col = self.values[..., v]
            obs = col[~np.isnan(col)]
            lo, hi = (float(obs.min()), float(obs.max())) if obs.size else (math.nan, math.nan)
            out.append((name, lo, hi))
        return out


@dataclass
class SequenceTensor:
    values: np.ndarray  # (B, T_w, H, W, C)
    window_length: int
    window_starts: list[int]
    frame_mask: np.ndarray = field(default=None)  # (B, T_w); True where the frame is real
    n_frames: int = 0

    @property
    def tensor(self) -> Tensor:
        return Tensor(self.values)

    @property
    def B(self) -> int:
        return self.values.shape[0]

    def frame_index(self, b: int, s: int) -> int | None:
        """Source time index of frame ``s`` in window ``b`` (None for padding)."""
        if not self.frame_mask[b, s]:
            return None
        return self.window_starts[b] + s

    def frames_to_series(self, per_frame: np.ndarray) -> np.ndarray:
        """Gather a (B, T_w, ...) per-frame array into (T, ...) in source time order."""
        return per_frame[self.frame_mask]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _parse_header(line: str) -> dict[str, str]:
    fields = {}
    for tok in line.strip().split():
        if "=" not in tok:
            raise DataError(f"malformed header token {tok!r} at byte offset 0")
        k, v = tok.split("=", 1)
        fields[k] = v
    return fields


def read_grid_container(path) -> GridDataset:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: header line not terminated")
    try:
        header = _parse_header(raw[:nl].decode("utf-8"))
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: header is not UTF-8 ({e})") from None
    if header.get("magic") != MAGIC:
        raise DataError(f"{path}: bad magic {header.get('magic')!r}, expected {MAGIC}")
    try:
        T, L, W, n = (int(header[k]) for k in ("T", "L", "W", "n"))
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed extents in header ({e})") from None
    if min(T, L, W, n) < 1:
        raise DataError(f"{path}: extents must be positive, got {(T, L, W, n)}")
    names = header.get("var_names", "")
    var_names = names.split(",") if names else [f"var{i}" for i in range(n)]
    if len(var_names) != n:
        raise DataError(f"{path}: header lists {len(var_names)} variable names for n={n}")
    payload = raw[nl + 1 :]
    expected = T * L * W * n * 8
    if len(payload) != expected:
        raise DataError(
            f"{path}: payload starting at byte offset {nl + 1} has {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(T, L, W, n)
    d = GridDataset(values, var_names)
    if d.n_missing:
        logger.info("%s: %d missing values", path, d.n_missing)
    return d


def write_grid_container(d: GridDataset, path) -> None:
    header = (
        f"magic={MAGIC} T={d.T} L={d.L} W={d.W} n={d.n} var_names={','.join(d.var_names)}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(d.values, dtype="<f8").tobytes())


def read_grid_csv(path) -> GridDataset:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "lon", "lat", "var", "value"]:
            raise DataError(f"{path}: expected header t,lon,lat,var,value, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}: line {lineno} has {len(row)} fields")
            try:
                t, lo, la = int(row[0]), int(row[1]), int(row[2])
                val = float(row[4]) if row[4].strip() else math.nan
            except ValueError as e:
                raise DataError(f"{path}: line {lineno}: {e}") from None
            rows.append((t, lo, la, row[3].strip(), val))
    if not rows:
        raise DataError(f"{path}: no data rows")
    var_names: list[str] = []
    for r in rows:
        if r[3] not in var_names:
            var_names.append(r[3])
    T = max(r[0] for r in rows) + 1
    L = max(r[1] for r in rows) + 1
    W = max(r[2] for r in rows) + 1
    if min(min(r[0], r[1], r[2]) for r in rows) < 0:
        raise DataError(f"{path}: negative grid index")
    values = np.full((T, L, W, len(var_names)), np.nan)
    for t, lo, la, v, val in rows:
        values[t, lo, la, var_names.index(v)] = val
    return GridDataset(values, var_names)


def write_grid_csv(d: GridDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "lon", "lat", "var", "value"])
        for idx in np.ndindex(d.shape):
            val = d.values[idx]
            w.writerow([idx[0], idx[1], idx[2], d.var_names[idx[3]], "" if np.isnan(val) else repr(float(val))])


def ingest_grid(path, format: str | None = None) -> GridDataset:
    """Read a grid-container (``.stgrid``) or CSV file; missing cells stay NaN."""
    if format is None:
        format = "csv" if str(path).lower().endswith(".csv") else "grid-container"
    if format == "csv":
        return read_grid_csv(path)
    if format == "grid-container":
        return read_grid_container(path)
    raise DataError(f"unknown grid format {format!r}")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def impute_mean(d: GridDataset) -> GridDataset:
    """Fill every missing cell with the mean of all observed values (all variables pooled)."""
    observed = ~d.missing_mask & ~np.isnan(d.values)
    if not observed.any():
        raise DataError("cannot impute: every value is missing")
    holes = ~observed
    if not holes.any():
        return replace(d, values=d.values.copy(), missing_mask=d.missing_mask.copy())
    fill = d.values[observed].mean()
    values = d.values.copy()
    values[holes] = fill
    return replace(d, values=values, missing_mask=d.missing_mask.copy())


def minmax_normalize(d: GridDataset) -> GridDataset:
    """Per-variable scaling to [0, 1]; constant variables map to 0."""
    if np.isnan(d.values).any():
        raise DataError("normalize after imputation: dataset still contains NaN")
    lo = d.values.min(axis=(0, 1, 2))
    hi = d.values.max(axis=(0, 1, 2))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (d.values - lo) / safe, 0.0)
    np.clip(scaled, 0.0, 1.0, out=scaled)
    norm = [(float(a), float(b)) for a, b in zip(lo, hi)]
    return replace(d, values=scaled, missing_mask=d.missing_mask.copy(), normalization=norm)


def denormalize(values: np.ndarray, normalization) -> np.ndarray:
    lo = np.array([a for a, _ in normalization])
    hi = np.array([b for _, b in normalization])
    return values * (hi - lo) + lo


def preprocess(d: GridDataset) -> GridDataset:
    return minmax_normalize(impute_mean(d))


def flatten_2d(d: GridDataset | np.ndarray) -> np.ndarray:
    """(T, L, W, n) -> (T, L*W*n), row-major over (lon, lat, var)."""
    values = d.values if isinstance(d, GridDataset) else np.asarray(d)
    return values.reshape(values.shape[0], -1).copy()


def unflatten(matrix: np.ndarray, L: int, W: int, n: int) -> np.ndarray:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[1] != L * W * n:
        raise DataError(f"matrix of shape {matrix.shape} cannot unflatten to (*, {L}, {W}, {n})")
    return matrix.reshape(matrix.shape[0], L, W, n).copy()


def to_sequence_tensor(d: GridDataset | np.ndarray, window_length: int) -> SequenceTensor:
    """Split the time axis into consecutive windows; the last one is zero-padded."""
    values = d.values if isinstance(d, GridDataset) else np.asarray(d, dtype=np.float64)
    T = values.shape[0]
    if window_length < 2:
        raise DataError("window_length must be >= 2")
    if window_length > T:
        raise DataError(f"window_length {window_length} exceeds series length {T}")
    B = math.ceil(T / window_length)
    out = np.zeros((B, window_length) + values.shape[1:])
    mask = np.zeros((B, window_length), dtype=bool)
    starts = []
    for b in range(B):
        s = b * window_length
        e = min(s + window_length, T)
        out[b, : e - s] = values[s:e]
        mask[b, : e - s] = True
        starts.append(s)
    return SequenceTensor(out, window_length, starts, mask, T)
