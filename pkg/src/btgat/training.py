"""Joint reconstruction + clustering optimization."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import GridDataset, SequenceTensor, to_sequence_tensor
from .kmeans import kmeans
from .model import ModelConfig, ModelState, embed, forward, init_model, save_checkpoint, soft_assign

logger = logging.getLogger(__name__)

FREQ_FLOOR = 1e-12
Q_FLOOR = 1e-12


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, state: ModelState | None = None, checkpoint: str | None = None):
        super().__init__(message)
        self.state = state
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    eta: float = 0.01
    mu: float = 0.9
    lam: float = 5.0
    update_interval: int = 10
    tol: float = 0.01
    patience: int = 3
    max_iters: int = 300
    warmup_steps: int = 30
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if not 0 <= self.mu < 1:
            raise ValueError("mu must lie in [0, 1)")
        if self.lam <= 0:
            raise ValueError("lam must be > 0")
        if not 0 < self.tol <= 1:
            raise ValueError("tol must lie in (0, 1]")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ClusterState:
    centroids: np.ndarray
    q: np.ndarray
    p: np.ndarray
    labels: np.ndarray
    delta_history: list[float] = field(default_factory=list)
    label_history: list[np.ndarray] = field(default_factory=list)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class LogRecord:
    step: int
    phase: str
    L_rec: float
    L_clus: float
    L_total: float
    delta: float | None = None

    def format(self) -> str:
        parts = [
            f"step={self.step}",
            f"phase={self.phase}",
            f"L_rec={self.L_rec!r}",
            f"L_clus={self.L_clus!r}",
            f"L_total={self.L_total!r}",
        ]
        if self.delta is not None:
            parts.append(f"delta={self.delta!r}")
        return " ".join(parts)


@dataclass
class TrainingLog:
    records: list[LogRecord] = field(default_factory=list)
    stop_reason: str = ""
    runtime_s: float = 0.0

    def append(self, rec: LogRecord) -> None:
        self.records.append(rec)
        logger.debug(rec.format())

    def lines(self) -> list[str]:
        return [r.format() for r in self.records]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")

    @property
    def refreshes(self) -> list[LogRecord]:
        return [r for r in self.records if r.delta is not None]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def reconstruction_loss(X, X_hat, mask=None) -> Tensor:
    """Mean squared error over the non-masked elements.

    ``mask`` is any boolean array broadcastable against ``X`` (e.g. a (B, T)
    frame mask padded with trailing singleton axes); True keeps an element.
    """
    X = ad.as_tensor(X)
    X_hat = ad.as_tensor(X_hat)
    if X.shape != X_hat.shape:
        raise ad.ShapeError("reconstruction_loss", X.shape, X_hat.shape)
    sq = ad.square(X - X_hat)
    if mask is None:
        return sq.mean()
    m = np.asarray(mask, dtype=np.float64)
    m = m.reshape(m.shape + (1,) * (X.ndim - m.ndim))
    count = float(np.broadcast_to(m, X.shape).sum())
    if count == 0:
        raise ValueError("reconstruction_loss: every element is masked")
    return (sq * m).sum() * (1.0 / count)


def target_distribution(q: np.ndarray) -> np.ndarray:
    """Sharpened, frequency-normalized targets p from soft assignments q (T, k)."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    f = np.maximum(q.sum(axis=0), FREQ_FLOOR)
    w = q * q / f
    return w / w.sum(axis=1, keepdims=True)


def clustering_loss(p, q) -> Tensor:
    """KL(p || q) averaged over rows; p is treated as a constant."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    q = ad.as_tensor(q)
    if p.shape != q.shape:
        raise ad.ShapeError("clustering_loss", p.shape, q.shape)
    T = p.shape[0]
    plogp = float(np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)))
    cross = (ad.log(ad.clip(q, min=Q_FLOOR)) * p).sum()
    return (plogp - cross) * (1.0 / T)


def total_loss(L_rec, L_clus, lam: float):
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    return L_rec + L_clus * lam


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_momentum_step(params: dict, grads: dict, opt: OptimizerState, eta: float, mu: float) -> dict:
    """Classical momentum: v <- mu*v - eta*g; theta <- theta + v.  Returns new arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    out = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = theta
            continue
        if g.shape != theta.shape:
            raise ad.ShapeError("sgd_momentum_step", theta.shape, g.shape)
        v = mu * opt.velocity.get(name, np.zeros_like(theta)) - eta * g
        opt.velocity[name] = v
        out[name] = theta + v
    return out


def clip_gradients(grads: dict, max_norm: float) -> dict:
    if not max_norm or max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm or not math.isfinite(norm):
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


# ---------------------------------------------------------------------------
# centroid initialization / refresh helpers
# ---------------------------------------------------------------------------


def init_centroids(embeddings, k: int, seed: int = 0) -> np.ndarray:
    """k-means (k-means++ seeding, best of 10 restarts) on latent embeddings."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.shape[0] < k:
        raise ValueError(f"need at least k={k} embeddings, got {E.shape[0]}")
    return kmeans(E, k, seed=seed).centroids


def hard_labels(q: np.ndarray) -> np.ndarray:
    return np.argmax(q, axis=1)  # first maximum wins ties


def label_change_fraction(old: np.ndarray, new: np.ndarray) -> float:
    return float(np.mean(np.asarray(old) != np.asarray(new)))


def reseed_empty_clusters(centroids: np.ndarray, E: np.ndarray, labels: np.ndarray) -> list[int]:
    """Move centroids of empty clusters onto the embedding farthest from its nearest centroid."""
    k = centroids.shape[0]
    counts = np.bincount(labels, minlength=k)
    moved = []
    for j in np.flatnonzero(counts == 0):
        d = ((E[:, None, :] - centroids[None, :, :]) ** 2).sum(-1).min(axis=1)
        far = int(np.argmax(d))
        centroids[j] = E[far]
        moved.append(int(j))
    return moved


def full_soft_assign(state: ModelState, seq: SequenceTensor) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings (T, d) and q (T, k) over the whole series, without a tape."""
    E = embed(state, seq)
    q = soft_assign(E, state.params["centroids"], state.config.alpha).data.copy()
    return E, q


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _subset(seq: SequenceTensor, windows: np.ndarray) -> tuple[SequenceTensor, np.ndarray]:
    """Sub-sequence of the given windows and the source time index of each real frame."""
    windows = np.sort(windows)
    mask = seq.frame_mask[windows]
    sub = SequenceTensor(seq.values[windows], seq.window_length, [seq.window_starts[b] for b in windows], mask, int(mask.sum()))
    bi, ti = np.nonzero(mask)
    times = np.array([sub.window_starts[b] for b in bi]) + ti
    return sub, times


def train_step(
    state: ModelState,
    opt: OptimizerState,
    batch: SequenceTensor,
    tcfg: TrainConfig,
    p_rows: np.ndarray | None = None,
    lam: float | None = None,
):
    """One gradient step; clustering term is used when ``p_rows`` is given."""
    P = state.tensors(requires_grad=True)
    with ad.Tape() as tape:
        out = forward(state, batch, P=P)
        L_rec = reconstruction_loss(out.target, out.reconstruction, batch.frame_mask)
        if p_rows is None:
            L_clus = None
            L = L_rec
        else:
            L_clus = clustering_loss(p_rows, out.q)
            L = total_loss(L_rec, L_clus, tcfg.lam if lam is None else lam)
    if not np.isfinite(L.item()):
        raise DivergenceError(f"non-finite loss at step {state.step}")
    g = ad.backward(L, tape)
    grads = {name: g[t] for name, t in P.items() if t in g}
    grads = clip_gradients(grads, tcfg.grad_clip)
    state.params = sgd_momentum_step(state.params, grads, opt, tcfg.eta, tcfg.mu)
    state.step += 1
    return L_rec.item(), (L_clus.item() if L_clus is not None else 0.0), L.item()


def _batches(rng: np.random.Generator, n_windows: int, batch_size: int):
    while True:
        perm = rng.permutation(n_windows)
        for i in range(0, n_windows, batch_size):
            yield perm[i : i + batch_size]


def train(
    dataset: GridDataset | np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    state: ModelState | None = None,
):
    """Warm-up on reconstruction, k-means centroid init, then joint training.

    Returns ``(state, cluster_state, log)``.
    """
    t0 = time.perf_counter()
    tcfg = train_config
    values = dataset.values if isinstance(dataset, GridDataset) else np.asarray(dataset, dtype=np.float64)
    T = values.shape[0]
    k = model_config.n_clusters
    if T < k:
        raise ValueError(f"series length {T} is shorter than k={k}")
    seq = to_sequence_tensor(values, model_config.window_length)
    if state is None:
        state = init_model(model_config, values.shape[1:], seed=tcfg.seed)
    state.meta = {"train_config": asdict(tcfg)}
    opt = OptimizerState()
    rng = np.random.default_rng(tcfg.seed)
    batches = _batches(rng, seq.B, tcfg.batch_size)
    log = TrainingLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = str(out_dir / "checkpoint.bin") if out_dir is not None else None
    last_good = {k_: v.copy() for k_, v in state.params.items()}

    def checkpoint():
        nonlocal last_good
        last_good = {k_: v.copy() for k_, v in state.params.items()}
        if ckpt_path and tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0:
            save_checkpoint(state, ckpt_path)

    def step(p_rows_fn=None, phase="pretrain"):
        windows = next(batches)
        batch, times = _subset(seq, windows)
        p_rows = p_rows_fn(times) if p_rows_fn else None
        try:
            rec = train_step(state, opt, batch, tcfg, p_rows)
        except DivergenceError as e:
            state.params = last_good
            if ckpt_path:
                save_checkpoint(state, ckpt_path)
            raise DivergenceError(str(e), state, ckpt_path) from None
        log.append(LogRecord(state.step, phase, *rec))
        checkpoint()

    for _ in range(tcfg.warmup_steps):
        step()

    E, _ = full_soft_assign(state, seq)
    state.params["centroids"] = init_centroids(E, k, seed=tcfg.seed)
    E, q = full_soft_assign(state, seq)
    labels = hard_labels(q)
    cs = ClusterState(state.params["centroids"].copy(), q, target_distribution(q), labels)
    cs.label_history.append(labels.copy())
    stable = 0
    log.stop_reason = "max_iters"
    for it in range(tcfg.max_iters):
        if it > 0 and it % tcfg.update_interval == 0:
            E, q = full_soft_assign(state, seq)
            new = hard_labels(q)
            delta = label_change_fraction(cs.labels, new)
            cs.delta_history.append(delta)
            cs.label_history.append(new.copy())
            log.records[-1].delta = delta
            moved = reseed_empty_clusters(state.params["centroids"], E, new)
            if moved:
                logger.info("reseeded empty clusters %s at step %d", moved, state.step)
                q = soft_assign(E, state.params["centroids"], model_config.alpha).data.copy()
            cs.q, cs.labels, cs.p = q, new, target_distribution(q)
            stable = stable + 1 if delta < tcfg.tol else 0
            if stable >= tcfg.patience:
                log.stop_reason = "converged"
                break
        p_all = cs.p
        step(lambda times: p_all[times], phase="joint")

    E, q = full_soft_assign(state, seq)
    cs.centroids = state.params["centroids"].copy()
    cs.q = q
    cs.p = target_distribution(q)
    cs.labels = hard_labels(q)
    state.meta["stop_reason"] = log.stop_reason
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, ckpt_path)
    log.runtime_s = time.perf_counter() - t0
    return state, cs, log
