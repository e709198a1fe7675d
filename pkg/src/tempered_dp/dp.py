"""DP-SGD: Poisson lots, per-example clipping, noisy aggregation, updates."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .accountant import RdpLedger
from .tensor import (
    WIDE_DTYPE,
    NumericDomainError,
    ParameterError,
    RngStream,
    check_finite,
    gaussian_sample,
    uniform,
)

log = logging.getLogger(__name__)


class ContractViolation(ValueError):
    """An input broke a precondition the privacy analysis relies on."""


# ---------------------------------------------------------------------------
# primitive steps


def clip_gradient(g, C: float):
    """Scale ``g`` by min(1, C / ||g||) in float64; zero stays zero."""
    if not C > 0:
        raise ParameterError(f"clip norm must be > 0, got {C}")
    g = np.asarray(g, dtype=WIDE_DTYPE)
    check_finite(g, what="gradient")
    norm = float(np.sqrt(np.dot(g.ravel(), g.ravel())))
    if norm <= C:
        return g.copy()
    return g * (C / norm)


def clip_rows(G, C: float):
    """Row-wise :func:`clip_gradient` on a (B, n) matrix, in float64.

    Returns ``(clipped, pre_clip_norms)``.
    """
    G = np.asarray(G, dtype=WIDE_DTYPE)
    if not np.all(np.isfinite(G)):
        raise NumericDomainError("per-example gradients contain non-finite values")
    norms = np.sqrt(np.einsum("ij,ij->i", G, G))
    scale = np.ones_like(norms)
    over = norms > C
    scale[over] = C / norms[over]
    return G * scale[:, None], norms


def poisson_sample_lot(n: int, q: float, rng: RngStream) -> np.ndarray:
    """Indices in ``range(n)`` each kept independently with probability q."""
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"q must lie in [0, 1], got {q}")
    if q == 0.0:
        return np.zeros(0, dtype=np.int64)
    if q == 1.0:
        return np.arange(n, dtype=np.int64)
    return np.flatnonzero(uniform(rng, n) < q).astype(np.int64)


def privatize_sum(total, C, M, expected_lot_size, rng: RngStream):
    """(sum + N(0, (M C)^2 I)) / L for an already clipped-and-summed gradient."""
    if expected_lot_size <= 0:
        raise ParameterError("expected lot size must be > 0")
    if M < 0:
        raise ParameterError("noise multiplier must be >= 0")
    total = np.asarray(total, dtype=WIDE_DTYPE)
    noise = gaussian_sample(rng, total.shape, M * C)
    return (total + noise) / expected_lot_size


def noisy_aggregate(clipped_grads, C, M, expected_lot_size, rng: RngStream, n=None):
    """Sum clipped per-example vectors, add noise of std M*C, divide by L.

    ``n`` (the vector length) is needed only when the lot is empty.
    """
    G = np.asarray(clipped_grads, dtype=WIDE_DTYPE)
    if G.size == 0:
        if n is None:
            raise ParameterError("vector length required for an empty lot")
        total = np.zeros(n, dtype=WIDE_DTYPE)
    else:
        G = G.reshape(G.shape[0], -1)
        norms = np.sqrt(np.einsum("ij,ij->i", G, G))
        if np.any(norms > C * (1 + 1e-6)):
            raise ContractViolation(
                f"input not clipped: max norm {norms.max():.6g} exceeds C={C}"
            )
        total = np.zeros(G.shape[1], dtype=WIDE_DTYPE)
        for row in G:  # fixed ascending order
            total += row
    return privatize_sum(total, C, M, expected_lot_size, rng)


def sgd_step(theta, grad, lr):
    return (theta - lr * np.asarray(grad)).astype(theta.dtype, copy=False)


@dataclass
class AdamState:
    t: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(0, np.zeros(n, dtype=WIDE_DTYPE), np.zeros(n, dtype=WIDE_DTYPE))


def adam_step(state: AdamState, theta, grad, lr, beta1=0.9, beta2=0.999, eps_hat=1e-8):
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ParameterError("Adam betas must lie in [0, 1)")
    g = np.asarray(grad, dtype=WIDE_DTYPE)
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    new = theta - lr * mhat / (np.sqrt(vhat) + eps_hat)
    return AdamState(t, m, v), new.astype(theta.dtype, copy=False)


# ---------------------------------------------------------------------------
# training


@dataclass
class DpSgdConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.1
    batch_size: int = 256  # expected lot size (private) or fixed batch size
    sampling_probability: float | None = None  # overrides batch_size / N
    microbatch_size: int = 1
    epochs: int = 15
    steps: int | None = None  # overrides epochs
    learning_rate: float = 0.15
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    seed: int = 0
    private: bool = True
    clip: bool = True
    delta: float = 1e-5
    target_epsilon: float | None = None
    eval_every: int | None = None  # steps between evaluations; default one epoch
    chunk_size: int | None = None

    def validate(self):
        if self.clip and not self.clip_norm > 0:
            raise ParameterError("clip_norm must be > 0")
        if self.noise_multiplier < 0:
            raise ParameterError("noise_multiplier must be >= 0")
        if self.private and not self.clip:
            raise ParameterError("private training requires clipping")
        if self.microbatch_size < 1 or self.batch_size < 1:
            raise ParameterError("batch and microbatch sizes must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.sampling_probability is not None and not 0 < self.sampling_probability <= 1:
            raise ParameterError("sampling_probability must lie in (0, 1]")

    def q(self, n: int) -> float:
        if self.sampling_probability is not None:
            return self.sampling_probability
        return min(1.0, self.batch_size / n)

    def total_steps(self, n: int) -> int:
        if self.steps is not None:
            return int(self.steps)
        return int(math.ceil(self.epochs / self.q(n))) if self.private else \
            self.epochs * int(math.ceil(n / self.batch_size))

    def steps_per_epoch(self, n: int) -> int:
        return max(1, int(round(1 / self.q(n)))) if self.private else \
            int(math.ceil(n / self.batch_size))


REPORT_COLUMNS = ("epoch", "step", "train_loss", "test_accuracy", "epsilon")
PROBE_COLUMNS = {
    "activation": ("first_conv_act_norm",),
    "gradient": ("grad_norm_median", "clipped_fraction"),
}


@dataclass
class TrainReport:
    columns: tuple
    rows: list = field(default_factory=list)
    stopped_early: bool = False
    seconds: float = 0.0
    theta: np.ndarray | None = field(default=None, repr=False)

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(",".join(self.columns) + "\n")
            for r in self.rows:
                f.write(",".join(_fmt(r.get(c)) for c in self.columns) + "\n")


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if math.isinf(v):
        return "inf"
    return f"{float(v):.8g}"


def activation_norm(net, theta, images, chunk=1000) -> float:
    """Mean over ``images`` of the l2 norm of the first conv activation."""
    total = 0.0
    for i in range(0, images.shape[0], chunk):
        a = nn.first_conv_activation(net, theta, images[i : i + chunk])
        a = a.reshape(a.shape[0], -1).astype(WIDE_DTYPE)
        total += float(np.sqrt(np.einsum("ij,ij->i", a, a)).sum())
    return total / images.shape[0]


def evaluate(net, theta, images, labels) -> float:
    return float(np.mean(nn.predict(net, theta, images) == labels))


def _chunk(cfg, n_params):
    if cfg.chunk_size:
        c = cfg.chunk_size
    else:
        c = max(1, min(256, (1 << 24) // n_params))
    m = cfg.microbatch_size
    return max(m, (c // m) * m)


def _private_gradient(net, theta, x, y, lot, cfg, rng, n_total, stats):
    C, M, m = cfg.clip_norm, cfg.noise_multiplier, cfg.microbatch_size
    total = np.zeros(net.num_params, dtype=WIDE_DTYPE)
    step = _chunk(cfg, net.num_params)
    for s in range(0, lot.size, step):
        idx = lot[s : s + step]
        g, loss = nn.per_example_gradients(net, theta, x[idx], y[idx], return_loss=True)
        if m > 1:
            pad = (-g.shape[0]) % m
            if pad:
                g = np.concatenate([g, np.zeros((pad, g.shape[1]), g.dtype)])
            # microbatch contribution = member sum / nominal size m
            g = g.astype(WIDE_DTYPE).reshape(-1, m, g.shape[1]).sum(axis=1) / m
        clipped, norms = clip_rows(g, C)
        total += clipped.sum(axis=0)
        stats["loss"].append(loss)
        stats["norms"].append(norms)
    lot_size = cfg.q(n_total) * n_total
    return privatize_sum(total, C, M, lot_size / m, rng)


def _nonprivate_gradient(net, theta, x, y, cfg, stats):
    if not cfg.clip:
        g, loss = nn.batch_gradient(net, theta, x, y, return_loss=True)
        stats["loss"].append(loss)
        return g.astype(WIDE_DTYPE)
    total = np.zeros(net.num_params, dtype=WIDE_DTYPE)
    step = _chunk(cfg, net.num_params)
    for s in range(0, x.shape[0], step):
        g, loss = nn.per_example_gradients(net, theta, x[s : s + step], y[s : s + step],
                                           return_loss=True)
        clipped, norms = clip_rows(g, cfg.clip_norm)
        total += clipped.sum(axis=0)
        stats["loss"].append(loss)
        stats["norms"].append(norms)
    return total / x.shape[0]


def _permutation(rng, n):
    return np.argsort(uniform(rng, n), kind="stable")


def train(net, train_data, test_data, config: DpSgdConfig, accountant=None,
          probes=("activation", "gradient"), theta=None, on_row=None) -> TrainReport:
    """Run DP-SGD (or the non-private baseline) and report per-epoch metrics.

    ``train_data`` / ``test_data`` are ``(images, labels)`` pairs.
    """
    config.validate()
    x, y = train_data
    xt, yt = test_data
    n = x.shape[0]
    root = RngStream(config.seed)
    if theta is None:
        theta = nn.init_params(net, root.derive("init"), dtype=x.dtype)
    theta = theta.copy()
    q = config.q(n)
    if config.private and accountant is None:
        accountant = RdpLedger(q, config.noise_multiplier if config.noise_multiplier > 0
                               else math.inf)
    if config.private and config.noise_multiplier == 0:
        log.warning("noise multiplier 0: no privacy guarantee")
    total_steps = config.total_steps(n)
    per_epoch = config.steps_per_epoch(n)
    eval_every = config.eval_every or per_epoch
    columns = REPORT_COLUMNS + tuple(c for p in probes for c in PROBE_COLUMNS[p])
    report = TrainReport(columns)
    adam = AdamState.zeros(net.num_params) if config.optimizer == "adam" else None
    stats = {"loss": [], "norms": []}
    t0 = time.perf_counter()

    def epsilon(steps):
        if not config.private:
            return math.inf
        if config.noise_multiplier == 0:
            return math.inf if steps else 0.0
        return accountant.spending(config.delta).epsilon

    def emit(step):
        row = {
            "epoch": step // per_epoch if step % per_epoch == 0 else round(step / per_epoch, 4),
            "step": step,
            "train_loss": float(np.mean(np.concatenate(stats["loss"]))) if stats["loss"] else math.nan,
            "test_accuracy": evaluate(net, theta, xt, yt),
            "epsilon": epsilon(step),
        }
        if "activation" in probes:
            row["first_conv_act_norm"] = activation_norm(net, theta, xt)
        if "gradient" in probes:
            if stats["norms"]:
                norms = np.concatenate(stats["norms"])
                row["grad_norm_median"] = float(np.median(norms))
                row["clipped_fraction"] = float(np.mean(norms > config.clip_norm))
            else:
                row["grad_norm_median"] = math.nan
                row["clipped_fraction"] = math.nan
        report.rows.append(row)
        stats["loss"].clear()
        stats["norms"].clear()
        if on_row:
            on_row(row)
        log.info("step %d: acc=%.4f eps=%.4g", step, row["test_accuracy"], row["epsilon"])

    emit(0)
    order = None
    for step in range(1, total_steps + 1):
        if config.private:
            if config.target_epsilon is not None:
                accountant.record_step()
                over = epsilon(step) > config.target_epsilon
                accountant.steps -= 1
                if over:
                    report.stopped_early = True
                    break
            lot = poisson_sample_lot(n, q, root.derive("lot", step))
            grad = _private_gradient(net, theta, x, y, lot, config,
                                     root.derive("noise", step), n, stats)
            accountant.record_step()
        else:
            b = config.batch_size
            k = (step - 1) % per_epoch
            if k == 0:
                order = _permutation(root.derive("perm", (step - 1) // per_epoch), n)
            idx = np.sort(order[k * b : (k + 1) * b])
            grad = _nonprivate_gradient(net, theta, x[idx], y[idx], config, stats)
        if adam is not None:
            adam, theta = adam_step(adam, theta, grad, config.learning_rate,
                                    config.beta1, config.beta2, config.eps_hat)
        else:
            theta = sgd_step(theta, grad, config.learning_rate)
        if not np.all(np.isfinite(theta)):
            raise NumericDomainError(f"parameters diverged at step {step}")
        if step % eval_every == 0 or step == total_steps:
            emit(step)
    if report.stopped_early and report.rows[-1]["step"] != accountant.steps:
        emit(accountant.steps)
    report.seconds = time.perf_counter() - t0
    report.theta = theta
    return report


def config_dict(cfg: DpSgdConfig) -> dict:
    return asdict(cfg)
