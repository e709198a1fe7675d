"""Experiment configuration: a flat ``key = value`` file plus CLI overrides."""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field, fields

BUDGETS = {"mnist": 2.93, "fashion-mnist": 2.7, "cifar10": 7.53}
FULL_EPOCHS = {"mnist": 60, "fashion-mnist": 40, "cifar10": 60}


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _optional(conv):
    def parse(s):
        return None if s.strip().lower() in ("", "none", "null") else conv(s)

    return parse


def _floats(s):
    return tuple(float(v) for v in s.replace(" ", "").split(",") if v)


def _strs(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _auto_float(s):
    return "auto" if s.strip().lower() == "auto" else float(s)


def _key(default, conv, help=""):
    return field(default=default, metadata={"conv": conv, "help": help})


@dataclass
class ExperimentConfig:
    # data and model
    dataset: str = _key("mnist", str, "mnist | fashion-mnist | cifar10")
    data_dir: str | None = _key(None, _optional(str), "dataset root (else $TEMPERED_DP_DATA_DIR)")
    architecture: str = _key("auto", str, "auto | mnist | cifar")
    activation: str = _key("tanh", str, "relu | tanh | tempered_sigmoid")
    scale: float = _key(2.0, float, "tempered sigmoid s")
    inverse_temp: float = _key(2.0, float, "tempered sigmoid T")
    offset: float = _key(1.0, float, "tempered sigmoid o")
    train_subset: int | None = _key(None, _optional(int), "use only the first N training images")
    test_subset: int | None = _key(None, _optional(int), "use only the first N test images")
    # optimisation
    private: bool = _key(True, _bool, "DP-SGD (true) or the non-private baseline")
    clip: bool = _key(True, _bool, "per-example clipping (non-private runs only may disable)")
    clip_norm: float = _key(1.0, float)
    noise_multiplier: object = _key("auto", _auto_float, "float, or auto = solve from budget")
    budget_epsilon: float | None = _key(None, _optional(float), "epsilon used by noise auto; default per dataset")
    batch_size: int = _key(256, int, "expected lot size")
    sampling_probability: float | None = _key(None, _optional(float))
    microbatch_size: int = _key(1, int)
    epochs: int = _key(15, int)
    steps: int | None = _key(None, _optional(int))
    learning_rate: float | None = _key(None, _optional(float), "default depends on mode/optimizer")
    optimizer: str = _key("sgd", str, "sgd | adam")
    beta1: float = _key(0.9, float)
    beta2: float = _key(0.999, float)
    eps_hat: float = _key(1e-8, float)
    delta: float = _key(1e-5, float)
    target_epsilon: float | None = _key(None, _optional(float), "stop when this epsilon would be exceeded")
    eval_every: int | None = _key(None, _optional(int), "steps between evaluations")
    chunk_size: int | None = _key(None, _optional(int))
    probes: tuple = _key(("activation", "gradient"), _strs, "activation,gradient or none")
    # sweep / curve
    sweep_scale: tuple = _key((1.0, 1.5, 2.0, 2.5, 3.0), _floats)
    sweep_inverse_temp: tuple = _key((1.0, 2.0, 3.0, 4.0), _floats)
    sweep_offset: tuple = _key((0.0, 0.5, 1.0, 1.5), _floats)
    sweep_subset: int | None = _key(10_000, _optional(int), "training images per sweep cell")
    jobs: int = _key(1, int, "parallel worker processes for sweep/curve")
    repeats: int = _key(1, int, "curve repeats (averaged)")
    curve_activations: tuple = _key(("relu", "tanh"), _strs)
    curve_nonprivate: bool = _key(False, _bool, "add a non-private ReLU scenario")
    warmup_epsilon: float = _key(1.0, float, "curve dominance checked for epsilon >= this")
    # accountant
    dataset_size: int | None = _key(None, _optional(int), "N for q = batch_size / N")
    solve_for: str = _key("none", str, "none | noise_multiplier | steps | sampling_probability")
    checkpoints: int = _key(10, int, "rows in the epsilon table")
    # bounds
    trials: int = _key(10_000, int)
    dim: int = _key(50, int)
    num_classes: int = _key(10, int)
    t_max: float = _key(8.0, float, "T drawn uniformly from [-t_max, t_max]")
    # run control
    seed: int = _key(0, int)
    out_dir: str = _key("runs", str)
    threads: int | None = _key(None, _optional(int), "BLAS thread limit")
    full: bool = _key(False, _bool, "full-length runs (60 epochs MNIST, 40 FashionMNIST)")
    long: bool = _key(False, _bool, "allow the CIFAR10 model")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def set(self, key: str, raw: str):
        f = _FIELDS.get(key)
        if f is None:
            raise ConfigError(_unknown(key))
        try:
            setattr(self, key, f.metadata["conv"](raw))
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(_fmt_item(x) for x in v)
            elif v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = _fmt_item(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _fmt_item(x):
    return repr(x) if isinstance(x, float) else str(x)


def _unknown(key):
    near = difflib.get_close_matches(key, _FIELDS, n=1)
    hint = f" (did you mean {near[0]!r}?)" if near else ""
    return f"unknown key {key!r}{hint}; valid keys: {', '.join(_FIELDS)}"


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, later keys win."""
    cfg = base if base is not None else ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            cfg.set(key, value)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def help_for(key: str) -> str:
    return _FIELDS[key].metadata.get("help", "")
