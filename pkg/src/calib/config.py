"""Run configuration: ``key = value`` files merged under command-line flags."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: Optional[str] = None
    # inputs
    preds: Optional[str] = None
    features: Optional[str] = None
    features_format: Optional[str] = None
    recal: Optional[str] = None
    eval: Optional[str] = None
    recal_features: Optional[str] = None
    eval_features: Optional[str] = None
    recal_preds: Optional[str] = None
    embed: Optional[str] = None
    # binning / kernel
    bins: int = 15
    bin_kind: str = "equal-width"
    kernel: str = "laplacian"
    gamma: Optional[float] = None
    gammas: Optional[str] = None
    pca: Optional[int] = None
    # recalibration / decision
    method: Optional[str] = None
    u: float = 1.0
    ratios: str = "2,5,10,20,50"
    # synth
    n: int = 2000
    d: int = 3
    clusters: int = 4
    bias: float = 0.2
    scale: float = 0.1
    seed: int = 0
    # outputs
    out: Optional[str] = None
    lce_csv: Optional[str] = None
    save_state: Optional[str] = None
    flags_out: Optional[str] = None
    out_preds: Optional[str] = None
    out_feats: Optional[str] = None
    out_truth: Optional[str] = None
    # execution
    threads: int = 1
    stamp: bool = False


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _field_type(f) -> type:
    name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
    for key, typ in _TYPES.items():
        if key in name:
            return typ
    return str


def _convert(key: str, raw: str, typ: type, lineno: int):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for {key!r}") from None


def default_config() -> RunConfig:
    cfg = RunConfig()
    env = os.environ.get("CALIB_THREADS")
    if env:
        try:
            cfg.threads = max(1, int(env))
        except ValueError:
            raise ConfigError(f"CALIB_THREADS must be an integer, got {env!r}") from None
    return cfg


def load_config(path) -> RunConfig:
    """Parse a config file; blank lines and ``#`` comments are ignored.

    Keys are :class:`RunConfig` field names (dashes may stand in for
    underscores). Unknown keys are errors.
    """
    cfg = default_config()
    known = {f.name: f for f in fields(RunConfig) if f.name != "subcommand"}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {text!r}")
            key, raw = (s.strip() for s in text.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            setattr(cfg, key, _convert(key, raw, _field_type(known[key]), lineno))
    return cfg


def merge(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Flags win over the file; ``None`` means the flag was not given."""
    for key, value in overrides.items():
        if value is not None and hasattr(cfg, key):
            setattr(cfg, key, value)
    return cfg
