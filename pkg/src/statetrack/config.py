"""Flat key=value configuration with typed defaults.

Config files are UTF-8 text, one ``key = value`` per line, ``#`` comments.
Every key must exist in DEFAULTS; values are coerced to the default's type.
"""

from .errors import ConfigurationError

PARITIES = ("even", "odd", "compress", "infer")

DEFAULTS = {
    # model
    "dim": 64,
    "heads": 4,
    "encoder_layers": 4,
    "decoder_layers": 3,
    "ssm_layers": 3,
    "ssm_state": 8,
    "template_size": 64,
    "search_size": 128,
    "crop_context": 2.0,
    # training
    "steps": 200,
    "batch_size": 8,
    "frames_per_sample": 4,
    "lr": 4e-4,
    "encoder_lr": 4e-5,
    "weight_decay": 1e-4,
    "decay_at": 0.8,
    "decay_factor": 0.1,
    "max_grad_norm": 1.0,
    "snapshot_every": 50,
    # data
    "canvas": 128,
    "train_sequences": 32,
    "seq_frames": 24,
    "speed": 2.0,
    # inference policy
    "threshold": 0.4,
    "interval": 60,
    "window": 500,
    "parity": "even",
    "seed": 0,
}


def _coerce(key, raw):
    default = DEFAULTS[key]
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigurationError(f"cannot parse {key}={raw!r} as {type(default).__name__}")


def validate_config(cfg):
    if not 0.0 <= cfg["threshold"] <= 1.0:
        raise ConfigurationError(f"threshold must be in [0,1], got {cfg['threshold']}")
    if cfg["interval"] < 1 or cfg["window"] < 1:
        raise ConfigurationError("interval and window must be >= 1")
    if cfg["parity"] not in PARITIES:
        raise ConfigurationError(f"parity must be one of {PARITIES}, got {cfg['parity']!r}")
    if cfg["template_size"] % 16 or cfg["search_size"] % 16:
        raise ConfigurationError("template_size and search_size must be multiples of 16")
    if cfg["search_size"] <= cfg["template_size"]:
        raise ConfigurationError("search_size must exceed template_size")
    if cfg["dim"] % cfg["heads"] or cfg["dim"] % 4:
        raise ConfigurationError("dim must be divisible by heads and by 4")
    for key in ("steps", "batch_size", "frames_per_sample", "canvas", "seq_frames"):
        if cfg[key] < 1 and not (key == "steps" and cfg[key] == 0):
            raise ConfigurationError(f"{key} must be positive, got {cfg[key]}")
    return cfg


def apply_overrides(cfg, overrides):
    """Merge key->raw-string overrides; unknown keys raise with the full list."""
    unknown = sorted(k for k in overrides if k not in DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(cfg)
    for key, raw in overrides.items():
        out[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return validate_config(out)


def parse_config(text):
    """Parse key=value text into a full config dict (defaults filled in)."""
    overrides = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {ln}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in overrides:
            raise ConfigurationError(f"line {ln}: duplicate key {key}")
        overrides[key] = value
    return apply_overrides(dict(DEFAULTS), overrides)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_text(cfg):
    """Canonical serialization: sorted key=value lines."""
    return "\n".join(f"{key}={cfg[key]}" for key in sorted(cfg)) + "\n"
