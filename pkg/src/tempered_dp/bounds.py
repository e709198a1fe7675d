"""Gradient-norm bounds of the tempered logistic loss, and an empirical check.

For the binary loss ``log(1 + exp(-y T <z, theta>))`` the gradient norm is
at most ``|T| ||z||``; for the softmax loss each per-class block is bounded by
the same quantity and the full gradient by ``sqrt(k) |T| ||z||``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .tensor import WIDE_DTYPE, ParameterError, RngStream, gaussian_sample, uniform

SLACK = 1e-9


@dataclass
class BinaryBoundCase:
    theta: np.ndarray
    z: np.ndarray
    y: int
    T: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=WIDE_DTYPE)
        self.z = np.asarray(self.z, dtype=WIDE_DTYPE)
        if self.y not in (-1, 1):
            raise ParameterError(f"binary label must be -1 or +1, got {self.y}")
        if self.theta.shape != self.z.shape or self.z.ndim != 1:
            raise ParameterError("theta and z must be vectors of equal length")


@dataclass
class MulticlassBoundCase:
    theta: np.ndarray  # (d, k)
    z: np.ndarray  # (d,)
    y: int  # index of the hot entry
    T: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=WIDE_DTYPE)
        self.z = np.asarray(self.z, dtype=WIDE_DTYPE)
        if self.theta.ndim != 2 or self.theta.shape[0] != self.z.shape[0]:
            raise ParameterError("theta must be (d, k) with d = len(z)")
        if not 0 <= self.y < self.k:
            raise ParameterError(f"label {self.y} outside 0..{self.k - 1}")

    @property
    def k(self) -> int:
        return self.theta.shape[1]

    @property
    def onehot(self) -> np.ndarray:
        e = np.zeros(self.k)
        e[self.y] = 1.0
        return e


def tempered_logistic_loss(c: BinaryBoundCase) -> float:
    margin = c.y * c.T * float(c.z @ c.theta)
    # log(1 + exp(-m)) without overflow
    return float(np.logaddexp(0.0, -margin))


def tempered_logistic_grad(c: BinaryBoundCase):
    """(gradient w.r.t. theta, its l2 norm)."""
    margin = c.T * c.y * float(c.z @ c.theta)
    w = expit(-margin)  # 1 / (1 + exp(T y <z, theta>))
    g = -c.T * c.y * w * c.z
    return g, float(np.linalg.norm(g))


def binary_bound(T: float, z) -> float:
    return abs(T) * float(np.linalg.norm(np.asarray(z, dtype=WIDE_DTYPE)))


def multiclass_loss(c: MulticlassBoundCase) -> float:
    """Negative log softmax probability of the true class at logits T <z, theta_j>."""
    logits = c.T * (c.z @ c.theta)
    return float(-log_softmax(logits)[c.y])


def multiclass_partial_grad(c: MulticlassBoundCase, m: int) -> np.ndarray:
    """Gradient of the softmax loss w.r.t. column ``m`` of theta.

    The sign convention is that of the positive log-likelihood, matching the
    bracket ``(1[m = y] - softmax_m)``; its norm is what the bound constrains.
    """
    if not 0 <= m < c.k:
        raise ParameterError(f"class index {m} outside 0..{c.k - 1}")
    p = softmax(c.T * (c.z @ c.theta))
    return (float(m == c.y) - p[m]) * c.T * c.z


def multiclass_full_grad(c: MulticlassBoundCase) -> np.ndarray:
    """(d, k) matrix whose column m is :func:`multiclass_partial_grad`."""
    p = softmax(c.T * (c.z @ c.theta))
    return np.outer(c.T * c.z, c.onehot - p)


def multiclass_bound(T: float, z, k: int) -> float:
    return math.sqrt(k) * binary_bound(T, z)


@dataclass
class BoundsReport:
    rows: list = field(default_factory=list)  # (trial, kind, norm, bound, ratio)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def max_ratio(self, kind=None) -> float:
        r = [row[4] for row in self.rows if kind is None or row[1] == kind]
        return max(r) if r else 0.0

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("trial,kind,norm,bound,ratio\n")
            for t, kind, norm, bound, ratio in self.rows:
                f.write(f"{t},{kind},{norm:.17g},{bound:.17g},{ratio:.17g}\n")


def _ratio(norm, bound):
    if bound == 0:
        return 0.0 if norm == 0 else math.inf
    return norm / bound


def _check(report, trial, kind, norm, bound, case):
    report.rows.append((trial, kind, norm, bound, _ratio(norm, bound)))
    if norm > bound + SLACK:
        report.violations.append((trial, kind, norm, bound, case))


def verify_bounds(trials: int, dim: int, k: int, T_range, rng: RngStream,
                  adversarial: bool = False, scale: float = 1.0) -> BoundsReport:
    """Sample random binary and multiclass cases and check both bounds.

    With ``adversarial`` the binary cases are built grossly misclassified
    (theta = -c y z with large c), which drives the ratio towards 1.
    Multiclass rows record the per-class blocks ("multiclass_block") and the
    full gradient against the sqrt(k) bound ("multiclass_full").
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    t_lo, t_hi = T_range
    report = BoundsReport()
    for t in range(trials):
        r = rng.derive("trial", t)
        T = float(t_lo + (t_hi - t_lo) * uniform(r.derive("T"), 1)[0])
        z = gaussian_sample(r.derive("z"), dim, scale)
        y = 1 if uniform(r.derive("y"), 1)[0] < 0.5 else -1
        if adversarial:
            # margin T y <z, theta> = -50 whatever the sign of T
            c = 0.0 if T == 0 else 50.0 / (T * max(float(z @ z), 1e-12))
            theta = -c * y * z
        else:
            theta = gaussian_sample(r.derive("theta"), dim, scale)
        case = BinaryBoundCase(theta, z, y, T)
        _, norm = tempered_logistic_grad(case)
        _check(report, t, "binary", norm, binary_bound(T, z), case)
        if k >= 2:
            th = gaussian_sample(r.derive("theta_k"), (dim, k), scale)
            if adversarial:
                # true class scored far below another class
                th[:, 0] += -c * z
                th[:, 1 % k] += c * z
            lab = int(uniform(r.derive("label"), 1)[0] * k) if not adversarial else 0
            mc = MulticlassBoundCase(th, z, lab, T)
            full = multiclass_full_grad(mc)
            b = binary_bound(T, z)
            for m in range(k):
                _check(report, t, "multiclass_block", float(np.linalg.norm(full[:, m])), b, mc)
            _check(report, t, "multiclass_full", float(np.linalg.norm(full)),
                   multiclass_bound(T, z, k), mc)
    return report
