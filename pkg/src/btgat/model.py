"""ConvLSTM U-Net autoencoder with a graph-attention/BiLSTM bottleneck and a
Student's-t clustering head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import ShapeError, Tensor
from .data import SequenceTensor

N_LEVELS = 4
POOLINGS = N_LEVELS - 1
INPUT_SCALE = 0.9  # inputs in [0, 1] are mapped to [-0.9, 0.9] to sit inside the tanh head's range
CHECKPOINT_MAGIC = "BTGATCKPT1"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    channel_capacities: tuple[int, ...] = (8, 16, 32, 64)
    latent_dim: int = 32
    knn_k: int = 3
    bilstm_hidden: int = 32
    n_clusters: int = 3
    alpha: float = 1.0
    window_length: int = 8
    attention_heads: int = 1

    def __post_init__(self):
        self.channel_capacities = tuple(int(c) for c in self.channel_capacities)
        if len(self.channel_capacities) != N_LEVELS:
            raise ValueError(f"channel_capacities needs {N_LEVELS} entries")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.bilstm_hidden < 2 or self.bilstm_hidden % 2:
            raise ValueError("bilstm_hidden must be a positive even number (two directions)")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.window_length < 2:
            raise ValueError("window_length must be >= 2")

    @classmethod
    def full_scale(cls, **overrides) -> ModelConfig:
        """Full-size capacities 64/128/256/512 with a 256-d latent code."""
        kw = dict(channel_capacities=(64, 128, 256, 512), latent_dim=256, bilstm_hidden=256)
        kw.update(overrides)
        return cls(**kw)


def padded_extent(n: int) -> int:
    m = 2**POOLINGS
    return -(-n // m) * m


@dataclass
class ModelState:
    config: ModelConfig
    input_shape: tuple[int, int, int]  # (H, W, n) before spatial padding
    params: dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def padded_shape(self) -> tuple[int, int]:
        H, W, _ = self.input_shape
        return padded_extent(H), padded_extent(W)

    @property
    def bottleneck_shape(self) -> tuple[int, int]:
        Hp, Wp = self.padded_shape
        return Hp // 2**POOLINGS, Wp // 2**POOLINGS

    @property
    def centroids(self) -> np.ndarray:
        return self.params["centroids"]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_model(config: ModelConfig, input_shape, seed: int = 0) -> ModelState:
    H, W, n = (int(s) for s in input_shape)
    if min(H, W, n) < 1:
        raise ShapeError("init_model", "positive (H, W, n)", (H, W, n))
    rng = np.random.default_rng(seed)
    caps = config.channel_capacities
    params: dict[str, np.ndarray] = {}

    def put(prefix, d):
        for k, v in d.items():
            params[f"{prefix}.{k}"] = v

    ins = (n,) + caps[:-1]
    for lvl in range(N_LEVELS):
        put(f"enc{lvl + 1}", layers.init_convlstm(rng, ins[lvl], caps[lvl]))
    c4 = caps[-1]
    put("gat", layers.init_graph_attention(rng, c4, c4, heads=config.attention_heads))
    half = config.bilstm_hidden // 2
    put("bilstm_f", layers.init_lstm(rng, c4, half))
    put("bilstm_b", layers.init_lstm(rng, c4, half))
    put("proj", layers.init_dense(rng, config.bilstm_hidden, config.latent_dim))
    h4, w4 = padded_extent(H) // 2**POOLINGS, padded_extent(W) // 2**POOLINGS
    put("seed", layers.init_dense(rng, config.latent_dim, h4 * w4 * c4))
    # decoder level l fuses the level above (or the seed) with skip S^(l)
    above = (c4,) + caps[:0:-1]  # channels arriving at dec4, dec3, dec2, dec1
    for j, lvl in enumerate(range(N_LEVELS, 0, -1)):
        put(f"dec{lvl}", layers.init_convlstm(rng, above[j] + caps[lvl - 1], caps[lvl - 1]))
    head = layers.init_convlstm(rng, caps[0], n)
    put("head", head)
    params["centroids"] = np.zeros((config.n_clusters, config.latent_dim))
    return ModelState(config, (H, W, n), params)


def _sub(P: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    pre = prefix + "."
    return {k[len(pre) :]: v for k, v in P.items() if k.startswith(pre)}


def _per_frame(fn, x: Tensor) -> Tensor:
    """Apply a 4-D (N, H, W, C) op to every frame of a (B, T, H, W, C) tensor."""
    B, T = x.shape[:2]
    y = fn(x.reshape((B * T,) + x.shape[2:]))
    return y.reshape((B, T) + y.shape[1:])


def map_input(values: np.ndarray) -> np.ndarray:
    return (2.0 * INPUT_SCALE) * values - INPUT_SCALE


def unmap_output(values: np.ndarray) -> np.ndarray:
    return (values + INPUT_SCALE) / (2.0 * INPUT_SCALE)


def prepare_input(state: ModelState, seq: SequenceTensor | np.ndarray) -> np.ndarray:
    """Mapped, spatially zero-padded (B, T, Hp, Wp, n) array for the encoder."""
    values = seq.values if isinstance(seq, SequenceTensor) else np.asarray(seq, dtype=np.float64)
    H, W, n = state.input_shape
    if values.ndim != 5 or values.shape[2:] != (H, W, n):
        raise ShapeError("encode", f"(B, T, {H}, {W}, {n})", values.shape)
    Hp, Wp = state.padded_shape
    x = map_input(values)
    if (Hp, Wp) != (H, W):
        x = np.pad(x, ((0, 0), (0, 0), (0, Hp - H), (0, Wp - W), (0, 0)))
    return x


@dataclass
class Encoding:
    frame_codes: Tensor  # (B, T, d): per-time-step latent E_t
    window_code: Tensor  # (B, d): latent of the whole window (from final BiLSTM states)
    skips: list[Tensor]  # S^(1)..S^(4)
    graph_sequence: Tensor  # G, (B, T, F)
    neighbors: np.ndarray  # (B*T, N, K)


def encode(state: ModelState, x: np.ndarray, mask: np.ndarray | None = None, P=None) -> Encoding:
    """Encoder pyramid + bottleneck on a prepared (B, T, Hp, Wp, n) input."""
    cfg = state.config
    P = state.tensors() if P is None else P
    h = ad.as_tensor(x)
    skips = []
    for lvl in range(1, N_LEVELS + 1):
        if lvl > 1:
            h = _per_frame(ad.max_pool2d, h)
        h = layers.convlstm_sequence(_sub(P, f"enc{lvl}"), h, mask)
        skips.append(h)
    B, T, h4, w4, c4 = h.shape
    Z = h.reshape((B * T, h4 * w4, c4))
    nbrs = layers.knn_neighbors(Z.data, cfg.knn_k)
    Zt = layers.graph_attention(_sub(P, "gat"), Z, nbrs)
    G = Zt.mean(axis=1).reshape((B, T, c4))
    b, seq = layers.bilstm_encode(_sub(P, "bilstm_f"), _sub(P, "bilstm_b"), G, mask)
    proj = _sub(P, "proj")
    return Encoding(layers.dense(proj, seq), layers.dense(proj, b), skips, G, nbrs)


def decode(state: ModelState, codes: Tensor, skips: list[Tensor], mask: np.ndarray | None = None, P=None) -> Tensor:
    """Mirror decoder; returns the tanh-head output (B, T, Hp, Wp, n).

    ``codes`` is either per-frame (B, T, d) or one code per window (B, d),
    which is then broadcast over the window's frames.
    """
    P = state.tensors() if P is None else P
    if len(skips) != N_LEVELS:
        raise ShapeError("decode", f"{N_LEVELS} skip tensors", len(skips))
    B, T, h4, w4, c4 = skips[-1].shape
    codes = ad.as_tensor(codes)
    if codes.shape[0] != B or codes.ndim not in (2, 3) or (codes.ndim == 3 and codes.shape[1] != T):
        raise ShapeError("decode", f"codes (B={B}, [T={T},] d)", codes.shape)
    s = layers.dense(_sub(P, "seed"), codes)
    if codes.ndim == 2:
        h = ad.broadcast(s.reshape((B, 1, h4, w4, c4)), (B, T, h4, w4, c4))
    else:
        h = s.reshape((B, T, h4, w4, c4))
    for lvl in range(N_LEVELS, 0, -1):
        skip = skips[lvl - 1]
        if lvl < N_LEVELS:
            h = _per_frame(ad.upsample2d, h)
        if h.shape[:4] != skip.shape[:4]:
            raise ShapeError("decode", skip.shape[:4], h.shape[:4])
        h = layers.convlstm_sequence(_sub(P, f"dec{lvl}"), ad.concat([h, skip], axis=-1), mask)
    head = _sub(P, "head")
    out = _head_sequence(head, h, mask)
    return ad.tanh(out)


def _head_sequence(p, xs: Tensor, mask) -> Tensor:
    # head ConvLSTM: per-channel affine of the hidden state, no layer norm
    B, T, H, W, _ = xs.shape
    _, cout = layers.convlstm_channels(p)
    h = Tensor(np.zeros((B, H, W, cout)))
    c = Tensor(np.zeros((B, H, W, cout)))
    kernel = ad.concat([p["Wx"], p["Wh"]], axis=2)
    outs = []
    for t in range(T):
        x_t = xs[:, t]
        _, (h_new, c_new) = layers.convlstm_step(p, x_t, (h, c), kernel=kernel)
        y = h_new * p["gamma"] + p["beta"] + ad.conv2d(x_t, p["Wres"])
        if mask is not None and not mask[:, t].all():
            m = mask[:, t].astype(np.float64).reshape(B, 1, 1, 1)
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
            y = y * m
        else:
            h, c = h_new, c_new
        outs.append(y)
    return ad.stack(outs, axis=1)


def soft_assign(E, centroids, alpha: float = 1.0) -> Tensor:
    """Student's-t soft assignment of embeddings (M, d) to centroids (k, d) -> (M, k)."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    E = ad.as_tensor(E)
    C = ad.as_tensor(centroids)
    single = E.ndim == 1
    if single:
        E = E.reshape((1, -1))
    M, d = E.shape
    k = C.shape[0]
    diff = E.reshape((M, 1, d)) - C.reshape((1, k, d))
    d2 = ad.square(diff).sum(axis=-1)
    kern = ad.power(1.0 + d2 * (1.0 / alpha), -(alpha + 1.0) / 2.0)
    q = kern / kern.sum(axis=1, keepdims=True)
    return q.reshape((k,)) if single else q


@dataclass
class ForwardOutput:
    reconstruction: Tensor  # (B, T, H, W, n) in mapped [-0.9, 0.9] space, spatial padding removed
    target: np.ndarray  # mapped input on the same grid
    embeddings: Tensor  # (M, d): frame codes of real frames, in source time order
    q: Tensor  # (M, k)
    encoding: Encoding


def forward(state: ModelState, seq: SequenceTensor | np.ndarray, mask: np.ndarray | None = None, P=None) -> ForwardOutput:
    """Reconstruction and cluster probabilities for every real frame of ``seq``."""
    if isinstance(seq, SequenceTensor):
        mask = seq.frame_mask if mask is None else mask
    P = state.tensors() if P is None else P
    x = prepare_input(state, seq)
    B, T = x.shape[:2]
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    run_mask = None if mask.all() else mask
    enc = encode(state, x, run_mask, P)
    out = decode(state, enc.window_code, enc.skips, run_mask, P)
    H, W, _ = state.input_shape
    if out.shape[2:4] != (H, W):
        out = out[:, :, :H, :W, :]
    bi, ti = np.nonzero(mask)
    E = enc.frame_codes[bi, ti]
    q = soft_assign(E, P["centroids"], state.config.alpha)
    return ForwardOutput(out, x[:, :, :H, :W, :], E, q, enc)


def embed(state: ModelState, seq: SequenceTensor) -> np.ndarray:
    """Per-frame latent embeddings (T, d) without recording a tape."""
    x = prepare_input(state, seq)
    mask = seq.frame_mask
    enc = encode(state, x, None if mask.all() else mask)
    bi, ti = np.nonzero(mask)
    return enc.frame_codes.data[bi, ti].copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(state: ModelState, path) -> None:
    header = {
        "config": asdict(state.config),
        "input_shape": list(state.input_shape),
        "step": state.step,
        "meta": state.meta,
    }
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {json.dumps(header, sort_keys=True)}\n".encode("utf-8"))
        names = sorted(state.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(state.params[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> ModelState:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    nl = raw.find(b"\n")
    line = raw[:nl].decode("utf-8", errors="replace") if nl >= 0 else ""
    if not line.startswith(CHECKPOINT_MAGIC + " "):
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = json.loads(line[len(CHECKPOINT_MAGIC) + 1 :])
    pos = nl + 1

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    cfg = ModelConfig(**header["config"])
    return ModelState(cfg, tuple(header["input_shape"]), params, header["step"], header.get("meta", {}))
