"""Building blocks: ConvLSTM, kNN graphs, graph attention, (Bi)LSTM and dense layers.

Parameters live in plain dicts of arrays (``init_*`` functions) so that the
model can flatten, checkpoint and update them; the forward functions accept the
same dicts holding :class:`~btgat.autodiff.Tensor` values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ATTENTION_SLOPE = 0.2


# Negative forget-gate bias at init keeps recurrent memory short, so per-frame
# codes follow regime changes instead of lagging them.
FORGET_BIAS = -1.0


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _as_param_tensors(p: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in p.items()}


# ---------------------------------------------------------------------------
# ConvLSTM
# ---------------------------------------------------------------------------


def init_convlstm(rng: np.random.Generator, in_channels: int, out_channels: int, kernel: int = 3) -> dict:
    """Gate order along the last kernel axis is (input, forget, cell, output)."""
    fan_in = kernel * kernel * (in_channels + out_channels)
    b = np.zeros(4 * out_channels)
    b[out_channels : 2 * out_channels] = FORGET_BIAS
    return {
        "Wx": glorot(rng, (kernel, kernel, in_channels, 4 * out_channels), fan_in, 4 * out_channels),
        "Wh": glorot(rng, (kernel, kernel, out_channels, 4 * out_channels), fan_in, 4 * out_channels),
        "b": b,
        "gamma": np.ones(out_channels),
        "beta": np.zeros(out_channels),
        "Wres": glorot(rng, (1, 1, in_channels, out_channels), in_channels, out_channels),
    }


def convlstm_channels(p: Mapping) -> tuple[int, int]:
    wx = p["Wx"].shape
    return wx[2], wx[3] // 4


def _gates(z: Tensor, cout: int):
    i = ad.sigmoid(z[..., 0:cout])
    f = ad.sigmoid(z[..., cout : 2 * cout])
    g = ad.tanh(z[..., 2 * cout : 3 * cout])
    o = ad.sigmoid(z[..., 3 * cout : 4 * cout])
    return i, f, g, o


def convlstm_step(p: Mapping, x_t, state, kernel: Tensor | None = None):
    """One ConvLSTM step on a batch of frames.

    ``x_t`` is (N, H, W, Cin) and ``state`` is ``(h, c)`` with shape (N, H, W, Cout).
    Returns ``(y, (h_new, c_new))`` where ``y`` is the layer-normalized hidden
    state plus the 1x1 residual projection of ``x_t``; the carried state is the
    raw LSTM state.  ``kernel`` may pass a precomputed concat of Wx and Wh.
    """
    p = _as_param_tensors(p)
    x_t = ad.as_tensor(x_t)
    h, c = (ad.as_tensor(s) for s in state)
    cin, cout = convlstm_channels(p)
    if x_t.ndim != 4 or x_t.shape[-1] != cin:
        raise ShapeError("convlstm_step", f"(N, H, W, {cin})", x_t.shape)
    if h.shape != x_t.shape[:3] + (cout,) or c.shape != h.shape:
        raise ShapeError("convlstm_step", x_t.shape[:3] + (cout,), (h.shape, c.shape))
    if kernel is None:
        kernel = ad.concat([p["Wx"], p["Wh"]], axis=2)
    z = ad.conv2d(ad.concat([x_t, h], axis=-1), kernel) + p["b"]
    i, f, g, o = _gates(z, cout)
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    y = ad.layer_norm(h_new) * p["gamma"] + p["beta"] + ad.conv2d(x_t, p["Wres"])
    return y, (h_new, c_new)


def convlstm_sequence(p: Mapping, xs, mask: np.ndarray | None = None) -> Tensor:
    """Run a ConvLSTM over (B, T, H, W, Cin) (or unbatched (T, H, W, Cin)).

    ``mask`` (B, T) marks real frames; masked frames keep the state frozen and
    emit zeros.
    """
    p = _as_param_tensors(p)
    xs = ad.as_tensor(xs)
    unbatched = xs.ndim == 4
    if unbatched:
        xs = xs.reshape((1,) + xs.shape)
        if mask is not None:
            mask = np.asarray(mask)[None]
    B, T, H, W, _ = xs.shape
    _, cout = convlstm_channels(p)
    h = Tensor(np.zeros((B, H, W, cout)))
    c = Tensor(np.zeros((B, H, W, cout)))
    kernel = ad.concat([p["Wx"], p["Wh"]], axis=2)
    outs = []
    for t in range(T):
        y, (h_new, c_new) = convlstm_step(p, xs[:, t], (h, c), kernel=kernel)
        if mask is not None and not mask[:, t].all():
            m = mask[:, t].astype(np.float64).reshape(B, 1, 1, 1)
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
            y = y * m
        else:
            h, c = h_new, c_new
        outs.append(y)
    out = ad.stack(outs, axis=1)
    return out.reshape(out.shape[1:]) if unbatched else out


# ---------------------------------------------------------------------------
# kNN graph + graph attention
# ---------------------------------------------------------------------------


@dataclass
class GraphSnapshot:
    features: np.ndarray  # (N, F)
    neighbors: np.ndarray  # (N, K) int; column 0 is the node itself

    @property
    def N(self) -> int:
        return self.neighbors.shape[0]


def knn_neighbors(Z: np.ndarray, k: int) -> np.ndarray:
    """Neighbor index array (..., N, min(k+1, N)) for node features (..., N, F).

    Each row starts with the node itself, followed by its k nearest other nodes
    by Euclidean distance; equal distances resolve toward the lower index.
    """
    Z = np.asarray(Z, dtype=np.float64)
    N = Z.shape[-2]
    K = min(k, N - 1) + 1
    diff = Z[..., :, None, :] - Z[..., None, :, :]
    dist = np.einsum("...ijf,...ijf->...ij", diff, diff)
    idx = np.arange(N)
    dist[..., idx, idx] = -np.inf
    order = np.argsort(dist, axis=-1, kind="stable")
    return order[..., :K]


def build_knn_graph(Z_t, k: int) -> GraphSnapshot:
    Z_t = np.asarray(Z_t.data if isinstance(Z_t, Tensor) else Z_t, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    return GraphSnapshot(Z_t, knn_neighbors(Z_t, k))


def init_graph_attention(rng: np.random.Generator, features: int, hidden: int, heads: int = 1) -> dict:
    p = {}
    for h in range(heads):
        p[f"phi{h}"] = glorot(rng, (features, hidden), features, hidden)
        p[f"a_src{h}"] = glorot(rng, (hidden, 1), hidden, 1)
        p[f"a_dst{h}"] = glorot(rng, (hidden, 1), hidden, 1)
    return p


def attention_weights(p: Mapping, Z, neighbors: np.ndarray, head: int = 0) -> Tensor:
    """Softmax weights (M, N, K) over each node's neighbor list."""
    p = _as_param_tensors(p)
    Z = ad.as_tensor(Z)
    M, N, _ = Z.shape
    m_idx = np.arange(M)[:, None, None]
    phi_z = Z @ p[f"phi{head}"]
    s_src = phi_z @ p[f"a_src{head}"]  # (M, N, 1)
    s_dst = (phi_z @ p[f"a_dst{head}"]).reshape((M, N))
    scores = ad.leaky_relu(s_src + s_dst[m_idx, neighbors], ATTENTION_SLOPE)
    return ad.softmax(scores, axis=-1)


def graph_attention(p: Mapping, Z, neighbors: np.ndarray) -> Tensor:
    """Attention-weighted neighbor aggregation of raw node features.

    ``Z`` is (M, N, F) for M independent graphs (or a single (N, F) graph);
    ``neighbors`` is the matching (M, N, K) index array.  With several heads
    the head outputs are averaged.
    """
    Z = ad.as_tensor(Z)
    single = Z.ndim == 2
    if single:
        Z = Z.reshape((1,) + Z.shape)
        neighbors = np.asarray(neighbors)[None]
    M, N, F = Z.shape
    if neighbors.shape[:2] != (M, N):
        raise ShapeError("graph_attention", (M, N, "K"), neighbors.shape)
    heads = sum(1 for k in p if k.startswith("phi"))
    m_idx = np.arange(M)[:, None, None]
    Zg = Z[m_idx, neighbors]  # (M, N, K, F)
    out = None
    for h in range(heads):
        w = attention_weights(p, Z, neighbors, head=h)
        agg = (w.reshape(w.shape + (1,)) * Zg).sum(axis=2)
        out = agg if out is None else out + agg
    if heads > 1:
        out = out * (1.0 / heads)
    return out.reshape(out.shape[1:]) if single else out


# ---------------------------------------------------------------------------
# LSTM / BiLSTM / dense
# ---------------------------------------------------------------------------


def init_lstm(rng: np.random.Generator, in_features: int, hidden: int) -> dict:
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = FORGET_BIAS
    return {
        "Wx": glorot(rng, (in_features, 4 * hidden), in_features + hidden, 4 * hidden),
        "Wh": glorot(rng, (hidden, 4 * hidden), in_features + hidden, 4 * hidden),
        "b": b,
    }


def lstm_step(p: Mapping, x_t, state):
    """Standard LSTM step; x_t (B, F), state (h, c) each (B, hidden)."""
    p = _as_param_tensors(p)
    h, c = state
    hidden = p["Wh"].shape[0]
    z = ad.as_tensor(x_t) @ p["Wx"] + h @ p["Wh"] + p["b"]
    i, f, g, o = _gates(z, hidden)
    c_new = f * c + i * g
    return o * ad.tanh(c_new), c_new


def lstm_sequence(p: Mapping, xs, mask: np.ndarray | None = None, reverse: bool = False):
    """Hidden states (B, T, hidden) and final hidden (B, hidden) over xs (B, T, F)."""
    p = _as_param_tensors(p)
    xs = ad.as_tensor(xs)
    B, T, _ = xs.shape
    hidden = p["Wh"].shape[0]
    h = Tensor(np.zeros((B, hidden)))
    c = Tensor(np.zeros((B, hidden)))
    outs: list = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h_new, c_new = lstm_step(p, xs[:, t], (h, c))
        if mask is not None and not mask[:, t].all():
            m = mask[:, t].astype(np.float64).reshape(B, 1)
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
        else:
            h, c = h_new, c_new
        outs[t] = h
    return ad.stack(outs, axis=1), h


def bilstm_encode(p_fwd: Mapping, p_bwd: Mapping, G, mask: np.ndarray | None = None):
    """Bidirectional summary of G (B, T, F).

    Returns ``(b, seq)``: ``b`` (B, 2*hidden) concatenates the final forward and
    final backward states; ``seq`` (B, T, 2*hidden) holds both directions'
    hidden states aligned per time step.
    """
    G = ad.as_tensor(G)
    unbatched = G.ndim == 2
    if unbatched:
        G = G.reshape((1,) + G.shape)
    seq_f, h_f = lstm_sequence(p_fwd, G, mask)
    seq_b, h_b = lstm_sequence(p_bwd, G, mask, reverse=True)
    b = ad.concat([h_f, h_b], axis=-1)
    seq = ad.concat([seq_f, seq_b], axis=-1)
    if unbatched:
        return b.reshape(b.shape[1:]), seq.reshape(seq.shape[1:])
    return b, seq


def init_dense(rng: np.random.Generator, in_features: int, out_features: int) -> dict:
    return {"W": glorot(rng, (in_features, out_features), in_features, out_features), "b": np.zeros(out_features)}


def dense(p: Mapping, x) -> Tensor:
    """Affine map ``x @ W + b`` on the last axis."""
    p = _as_param_tensors(p)
    x = ad.as_tensor(x)
    if x.shape[-1] != p["W"].shape[0]:
        raise ShapeError("dense", f"last axis {p['W'].shape[0]}", x.shape)
    if x.ndim == 1:
        return (x.reshape((1, -1)) @ p["W"]).reshape((p["W"].shape[1],)) + p["b"]
    return x @ p["W"] + p["b"]
