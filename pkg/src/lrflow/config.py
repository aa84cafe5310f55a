"""Flat key=value run configuration.

Defaults carry the published hyperparameters (lr 1e-5, dropout 0.1,
batch 64, 10 sampling steps, length 64, 20k iterations).  Task presets
rescale them for single-CPU runs; a config file and ``key=value``
overrides are layered on top, in that order.
"""

from __future__ import annotations

DEFAULTS = {
    "task": "gauss2d",
    "seed": 0,
    "mode": "lexico",
    "latent_dim": 16,
    "hidden_dims": "256,256",
    "time_embed_dim": 32,
    "time_scale": 100.0,
    "activation": "tanh",
    "embed_dim": 32,
    "rnn_hidden": 64,
    "max_len": 64,
    "dropout": 0.1,
    "word_dropout": 0.0,
    "batch_size": 64,
    "lr": 1e-5,
    "iterations": 20000,
    "steps": 10,
    "kl_warmup_steps": 2000,
    "kl_max": 1.0,
    "constraint": "running_min",
    "constraint_init": 0.0,
    "corpus_size": 5000,
    "target_length": 12,
    "source_style": 0,
    "target_style": 1,
    "gauss_mu1": "3,0",
    "gauss_sigma1": 1.0,
    "checkpoint_every": 0,
    "eval_samples": 200,
    "divergence_limit": 1e6,
}

PRESETS = {
    "gauss2d": {
        "latent_dim": 2,
        "lr": 3e-4,
        "batch_size": 512,
        "iterations": 10000,
    },
    "length_control": {
        "lr": 3e-3,
        "iterations": 5000,
        "dropout": 0.0,
        "kl_warmup_steps": 1000,
        "kl_max": 0.03,
        "corpus_size": 5000,
    },
    "style_transfer": {
        "lr": 3e-3,
        "iterations": 1500,
        "dropout": 0.0,
        "kl_warmup_steps": 1000,
        "kl_max": 0.03,
        "constraint_init": float("inf"),
        "corpus_size": 4000,
    },
}

TASKS = tuple(PRESETS)


class ConfigError(ValueError):
    pass


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(value, str):
        value = value.strip()
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def parse_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(task=None, file_values=None, overrides=None):
    """Effective config: defaults <- task preset <- file <- overrides."""
    layers = [dict(file_values or {}), dict(overrides or {})]
    for layer in layers:
        unknown = sorted(set(layer) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if task is None:
        for layer in layers:
            task = layer.get("task", task)
    task = task or DEFAULTS["task"]
    if task not in PRESETS:
        raise ConfigError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    cfg = dict(DEFAULTS)
    cfg.update(PRESETS[task])
    for layer in layers:
        cfg.update({k: _coerce(k, v) for k, v in layer.items()})
    cfg["task"] = task
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg["task"] == "gauss2d" and cfg["latent_dim"] != 2:
        raise ConfigError("gauss2d works on raw 2-d points; latent_dim must be 2")
    if cfg["steps"] < 1:
        raise ConfigError("steps must be >= 1")
    if cfg["batch_size"] < 1:
        raise ConfigError("batch_size must be >= 1")
    if not 0.0 <= cfg["kl_max"] <= 1.0:
        raise ConfigError("kl_max must lie in [0, 1]")
    if cfg["iterations"] < 0:
        raise ConfigError("iterations must be >= 0")
    if cfg["constraint"] != "running_min":
        try:
            float(cfg["constraint"])
        except ValueError:
            raise ConfigError("constraint must be 'running_min' or a number") from None


def dumps(cfg):
    """Stable text form, also the echo written into run directories."""
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def hidden_dims(cfg):
    return tuple(int(x) for x in str(cfg["hidden_dims"]).split(",") if x.strip())


def gauss_mu1(cfg):
    return [float(x) for x in str(cfg["gauss_mu1"]).split(",")]
