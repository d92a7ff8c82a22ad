"""Run configuration: key=value files, typed fields, command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .synth import RegimeSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key, unparsable value or invalid combination of settings."""


@dataclass
class RunConfig:
    # paths
    input: str = ""
    format: str = ""
    checkpoint: str = ""
    labels: str = ""
    truth: str = ""
    out: str = "out"
    # run control
    seed: int = 0
    threads: int = 1
    # model
    channel_capacities: tuple = (8, 16, 32, 64)
    latent_dim: int = 32
    knn_k: int = 3
    bilstm_hidden: int = 32
    n_clusters: int = 3
    alpha: float = 1.0
    window_length: int = 8
    attention_heads: int = 1
    # training
    eta: float = 0.01
    mu: float = 0.9
    lam: float = 5.0
    update_interval: int = 10
    tol: float = 0.01
    patience: int = 3
    max_iters: int = 300
    warmup_steps: int = 30
    batch_size: int = 4
    checkpoint_every: int = 0
    grad_clip: float = 5.0
    # elbow / evaluation / baselines
    k_min: int = 2
    k_max: int = 10
    linkage: str = "ward"
    method: str = ""
    space: str = "raw"
    # synthetic data
    n_regimes: int = 3
    segment_lengths: tuple = (17, 23, 19, 21, 18, 22)
    grid: tuple = (16, 16)
    n_vars: int = 3
    noise_sigma: float = 0.1
    missing_rate: float = 0.0
    level_spread: float = 0.3

    def model_config(self) -> ModelConfig:
        return _build(ModelConfig, self)

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, self)

    def regime_spec(self) -> RegimeSpec:
        return _build(RegimeSpec, self, segment_lengths=list(self.segment_lengths), grid=tuple(self.grid))

    def validate(self) -> RunConfig:
        for build in (self.model_config, self.train_config, self.regime_spec):
            build()
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.space not in ("raw", "latent"):
            raise ConfigError(f"space must be raw or latent, got {self.space!r}")
        if self.linkage not in ("ward", "average"):
            raise ConfigError(f"linkage must be ward or average, got {self.linkage!r}")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError("need 1 <= k_min <= k_max")
        return self

    def to_text(self) -> str:
        """Resolved configuration in the same key=value form ``load_config`` reads.

        ``out`` is left out: the echo is written into that directory, and
        leaving it out keeps echoes of identical runs byte-identical.
        """
        return "".join(
            f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self) if f.name != "out"
        )

    def update(self, pairs: dict[str, str]) -> RunConfig:
        known = {f.name: f for f in fields(self)}
        for key, raw in pairs.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _parse(key, raw, known[key].default))
        return self


def _build(cls, cfg: RunConfig, **extra):
    names = {f.name for f in fields(cls)}
    kw = {name: getattr(cfg, name) for name in names if hasattr(cfg, name)}
    kw.update(extra)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(lines, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        cfg.update(parse_pairs(text.splitlines(), str(path)))
    if overrides:
        cfg.update(overrides)
    return cfg.validate()
