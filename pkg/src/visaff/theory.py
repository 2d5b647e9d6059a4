"""Empirical checks of the risk decomposition and the Rademacher generalization bound.

Two steps are kept apart. The convexity step bounds the fused loss pointwise by
``c * l_v + (1 - c) * l_aux``. The covariance expansion of the mean of that
right-hand side is then an exact identity. Reports carry both numbers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from ._rng import named_rng

M_DEFAULT = 10.0


def _fmean(x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    return math.fsum(x) / x.size


def _check_simplex(p: np.ndarray, what: str, atol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim not in (1, 2) or p.shape[-1] < 1:
        raise ValueError(f"{what} must be a probability vector or a matrix of them")
    if not np.all(np.isfinite(p)) or np.any(p < -atol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError(f"{what} is not a valid distribution")
    return p


def fuse_predictions(c, p_v, p_aux) -> np.ndarray:
    """``c * p_v + (1 - c) * p_aux``, row-wise when given matrices."""
    p_v = _check_simplex(p_v, "p_v")
    p_aux = _check_simplex(p_aux, "p_aux")
    if p_v.shape != p_aux.shape:
        raise ValueError("p_v and p_aux differ in shape")
    c = np.asarray(c, dtype=float)
    if np.any(c < 0) or np.any(c > 1) or not np.all(np.isfinite(c)):
        raise ValueError("c must lie in [0, 1]")
    if p_v.ndim == 2:
        c = np.broadcast_to(c, (p_v.shape[0],))[:, None]
    return c * p_v + (1.0 - c) * p_aux


# ------------------------------------------------------------------- losses


def bounded_cross_entropy(p, y, M: float = M_DEFAULT) -> np.ndarray:
    """``-log((1 - e^-M) p_y + e^-M)``: convex in ``p``, equal to 0 at ``p_y = 1`` and ``M`` at ``p_y = 0``.

    A hard ``min(-log p_y, M)`` clip is not convex near the clip point, so the
    floor is mixed in before the log instead.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    floor = math.exp(-M)
    return -np.log((1.0 - floor) * p[np.arange(p.shape[0]), y] + floor)


def squared_loss(p, y) -> np.ndarray:
    """Brier score; convex and bounded by 2."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    onehot = np.zeros_like(p)
    onehot[np.arange(p.shape[0]), y] = 1.0
    return ((p - onehot) ** 2).sum(axis=1)


def softmax_rows(logits) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits, dtype=float))
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ------------------------------------------------------------ risk samples


@dataclass
class RiskSamples:
    """Per-instance gate value and the three losses, stored column-wise."""

    c: np.ndarray
    loss_v: np.ndarray
    loss_aux: np.ndarray
    loss_fuse: np.ndarray
    labels: np.ndarray
    M: float = M_DEFAULT

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.shape[0]
        for name in ("loss_v", "loss_aux", "loss_fuse"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > self.M + 1e-12):
                raise ValueError(f"{name} outside [0, {self.M}]")
            setattr(self, name, arr)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if np.any(self.c < 0) or np.any(self.c > 1):
            raise ValueError("c outside [0, 1]")

    def __len__(self) -> int:
        return self.c.shape[0]

    @classmethod
    def from_distributions(cls, c, p_v, p_aux, labels, loss: Callable = bounded_cross_entropy,
                           M: float = M_DEFAULT) -> "RiskSamples":
        p_fuse = fuse_predictions(c, p_v, p_aux)
        return cls(np.asarray(c, dtype=float), loss(p_v, labels), loss(p_aux, labels), loss(p_fuse, labels),
                   labels, M)

    @classmethod
    def from_traces(cls, traces: Iterable, M: float = M_DEFAULT) -> "RiskSamples":
        """``h_v`` is the auxiliary visual classifier, ``h_aux`` the model with the gate forced open."""
        rows = [t for t in traces if t.label is not None]
        if not rows:
            raise ValueError("no labelled traces")
        c = np.array([t.c for t in rows])
        p_v = softmax_rows(np.stack([t.aux_logits for t in rows]))
        p_aux = softmax_rows(np.stack([t.open_logits for t in rows]))
        labels = np.array([t.label for t in rows])
        return cls.from_distributions(c, p_v, p_aux, labels, lambda p, y: bounded_cross_entropy(p, y, M), M)


def convexity_check(c, p_v, p_aux, labels, loss: Callable = bounded_cross_entropy) -> float:
    """Largest ``l(fused) - (c l(p_v) + (1 - c) l(p_aux))``; at most rounding error for a convex loss."""
    c = np.asarray(c, dtype=float)
    fused = loss(fuse_predictions(c, p_v, p_aux), labels)
    mix = c * loss(p_v, labels) + (1.0 - c) * loss(p_aux, labels)
    return float(np.max(fused - mix))


@dataclass
class DecompositionReport:
    n: int
    M: float
    mean_c: float
    weighted_risk_v: float  # E[c] * R(h_v)
    weighted_risk_aux: float  # E[1 - c] * R(h_aux)
    cov_c_loss_v: float
    cov_c_loss_aux: float
    risk_fuse: float
    mixture_risk: float  # E[c l_v + (1 - c) l_aux]
    identity_value: float
    identity_residual: float
    slack: float

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "M": self.M,
            "loss": "bounded cross-entropy -log((1-e^-M) p_y + e^-M)",
            "mean_c": self.mean_c,
            "weighted_risk_v": self.weighted_risk_v,
            "weighted_risk_aux": self.weighted_risk_aux,
            "cov_c_loss_v": self.cov_c_loss_v,
            "cov_c_loss_aux": self.cov_c_loss_aux,
            "risk_fuse": self.risk_fuse,
            "mixture_risk": self.mixture_risk,
            "identity_value": self.identity_value,
            "identity_residual": self.identity_residual,
            "slack": self.slack,
        }


def covariance(a, b) -> float:
    """Population (1/n) covariance; the expansion identity is exact for it."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return _fmean((a - _fmean(a)) * (b - _fmean(b)))


def risk_decomposition(samples: RiskSamples) -> DecompositionReport:
    n = len(samples)
    if n < 2:
        raise ValueError("risk decomposition needs at least 2 samples")
    c, lv, la = samples.c, samples.loss_v, samples.loss_aux
    mean_c = _fmean(c)
    rv, ra = _fmean(lv), _fmean(la)
    cov_v, cov_a = covariance(c, lv), covariance(c, la)
    mixture = _fmean(c * lv) + _fmean((1.0 - c) * la)
    identity = math.fsum([mean_c * rv, (1.0 - mean_c) * ra, cov_v, -cov_a])
    risk_fuse = _fmean(samples.loss_fuse)
    return DecompositionReport(n, samples.M, mean_c, mean_c * rv, (1.0 - mean_c) * ra, cov_v, cov_a,
                               risk_fuse, mixture, identity, abs(mixture - identity), identity - risk_fuse)


@dataclass
class GateLossCorrelation:
    n: int
    cov_c_loss_v: float
    cov_c_loss_aux: float
    degenerate: bool

    def to_json(self) -> dict:
        return {"n": self.n, "cov_c_loss_v": self.cov_c_loss_v, "cov_c_loss_aux": self.cov_c_loss_aux,
                "degenerate": self.degenerate}


def gate_loss_correlation(traces: Iterable, M: float = M_DEFAULT) -> GateLossCorrelation:
    """``(Cov(c, l_v), Cov(c, l_aux))`` over labelled traces; constant ``c`` is flagged, not an error."""
    samples = RiskSamples.from_traces(traces, M)
    if len(samples) < 2:
        raise ValueError("need at least 2 labelled traces")
    degenerate = bool(np.all(samples.c == samples.c[0]))
    if degenerate:
        return GateLossCorrelation(len(samples), 0.0, 0.0, True)
    return GateLossCorrelation(len(samples), covariance(samples.c, samples.loss_v),
                               covariance(samples.c, samples.loss_aux), False)


# --------------------------------------------------------------- Rademacher


@dataclass
class RademacherEstimate:
    value: float
    stderr: float
    draws: int
    n: int
    n_hypotheses: int
    exhaustive: bool = False

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "stderr": self.stderr,
            "draws": self.draws,
            "n": self.n,
            "n_hypotheses": self.n_hypotheses,
            "exhaustive": self.exhaustive,
            "note": "lower estimate: supremum taken over a finite hypothesis sample",
        }


def _as_value_matrix(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("empty hypothesis sample")
    if values.shape[1] == 0:
        raise ValueError("no data points")
    return values


def empirical_rademacher(values, draws: int = 1000, rng: np.random.Generator | None = None
                         ) -> RademacherEstimate:
    """Mean over sign draws of ``max_h (1/n) sum_i sigma_i v_h(x_i)``.

    ``values[h, i]`` is what hypothesis ``h`` contributes at point ``i`` (a loss
    or a score). With finitely many hypotheses this under-estimates the
    complexity of the class they came from.
    """
    values = _as_value_matrix(values)
    if draws < 100:
        raise ValueError("need at least 100 sign draws")
    rng = rng if rng is not None else named_rng(0, "rademacher")
    n = values.shape[1]
    sigma = rng.choice(np.array([-1.0, 1.0]), size=(draws, n))
    sups = (sigma @ values.T).max(axis=1) / n
    return RademacherEstimate(_fmean(sups), float(np.std(sups, ddof=1) / math.sqrt(draws)), draws, n,
                              values.shape[0])


def exhaustive_rademacher(values) -> RademacherEstimate:
    """Exact expectation over all ``2^n`` sign vectors (``n <= 16``)."""
    values = _as_value_matrix(values)
    n = values.shape[1]
    if n > 16:
        raise ValueError("exhaustive enumeration limited to n <= 16")
    sigma = np.array(list(itertools.product((-1.0, 1.0), repeat=n)))
    sups = (sigma @ values.T).max(axis=1) / n
    return RademacherEstimate(_fmean(sups), 0.0, sigma.shape[0], n, values.shape[0], exhaustive=True)


# -------------------------------------------------------------- bound check


def confidence_term(M: float, n: int, delta: float) -> float:
    """``3 M sqrt(ln(2/delta) / 2n)``; taken as 0 at ``delta = 1`` where the statement is vacuous."""
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    if delta == 1.0:
        return 0.0
    return 3.0 * M * math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def bound_value(empirical_risk: float, rademacher: float, L: float, M: float, n: int, delta: float) -> float:
    return empirical_risk + 2.0 * L * rademacher + confidence_term(M, n, delta)


@dataclass
class LinearBoundProblem:
    """Scores ``w . x`` with ``||w|| <= B`` on inputs in the unit ball, logistic loss.

    On this class ``|w . x| <= B``, so the loss lies in ``[0, log(1 + e^B)]`` and is
    1-Lipschitz in the score. Labels follow a linear teacher with flip noise.
    """

    d: int = 5
    B: float = 2.0
    flip: float = 0.1
    n_hypotheses: int = 64
    spread: float = 0.5
    fit_steps: int = 200
    fit_lr: float = 0.5

    @property
    def M(self) -> float:
        return math.log1p(math.exp(self.B))

    @property
    def L(self) -> float:
        return 1.0

    def teacher(self) -> np.ndarray:
        w = np.zeros(self.d)
        w[0] = 1.0
        return w

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        x = rng.standard_normal((n, self.d))
        x /= np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1.0)
        x *= rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / self.d)
        y = np.where(x @ self.teacher() >= 0, 1.0, -1.0)
        y[rng.random(n) < self.flip] *= -1.0
        return x, y

    def project(self, w: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(w, axis=-1, keepdims=True)
        return w * np.minimum(1.0, self.B / np.maximum(norms, 1e-300))

    def fit(self, x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Projected gradient descent on the empirical logistic risk."""
        w = np.zeros(self.d)
        for _ in range(self.fit_steps):
            m = y * (x @ w)
            grad = -(x * (y / (1.0 + np.exp(m)))[:, None]).mean(axis=0)
            w = self.project(w - self.fit_lr * grad)
        return w

    def hypothesis_sample(self, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        draws = w + self.spread * rng.standard_normal((self.n_hypotheses - 1, self.d))
        return np.vstack([w, self.project(draws)])

    def scores(self, W: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(W) @ x.T

    def loss(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.logaddexp(0.0, -y * (x @ w))

    def class_rademacher(self, x: np.ndarray, sigma: np.ndarray) -> float:
        """Exact supremum over the ball for each sign draw: ``B ||sum sigma_i x_i|| / n``."""
        return _fmean(self.B * np.linalg.norm(sigma @ x, axis=1) / x.shape[0])


@dataclass
class BoundReport:
    delta: float
    n: int
    M: float
    L: float
    resamples: int
    empirical_risk: list[float] = field(default_factory=list)
    rademacher: list[float] = field(default_factory=list)
    rademacher_class: list[float] = field(default_factory=list)
    bound: list[float] = field(default_factory=list)
    bound_class: list[float] = field(default_factory=list)
    population_risk: list[float] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return int(sum(p > b for p, b in zip(self.population_risk, self.bound)))

    @property
    def violations_class(self) -> int:
        return int(sum(p > b for p, b in zip(self.population_risk, self.bound_class)))

    @property
    def violation_fraction(self) -> float:
        return self.violations / self.resamples

    @property
    def tolerance(self) -> float:
        """``delta`` plus three binomial standard errors at rate ``delta``."""
        return self.delta + 3.0 * math.sqrt(self.delta * (1.0 - self.delta) / self.resamples)

    @property
    def min_slack(self) -> float:
        return float(min(b - p for p, b in zip(self.population_risk, self.bound)))

    def to_json(self) -> dict:
        mean = lambda xs: _fmean(xs) if xs else None  # noqa: E731
        return {
            "delta": self.delta,
            "n": self.n,
            "M": self.M,
            "L": self.L,
            "resamples": self.resamples,
            "mean_empirical_risk": mean(self.empirical_risk),
            "mean_rademacher_estimate": mean(self.rademacher),
            "rademacher_note": "lower estimate over a finite hypothesis sample around the fitted point",
            "mean_rademacher_class": mean(self.rademacher_class),
            "mean_bound": mean(self.bound),
            "mean_bound_class": mean(self.bound_class),
            "mean_population_risk": mean(self.population_risk),
            "violations": self.violations,
            "violation_fraction": self.violation_fraction,
            "violations_class": self.violations_class,
            "tolerance": self.tolerance,
            "confidence_term": confidence_term(self.M, self.n, self.delta),
        }


def bound_check(problem=None, n: int = 200, delta: float = 0.1, resamples: int = 200, draws: int = 200,
                holdout: int = 20000, seed: int = 0) -> BoundReport:
    """Draw ``resamples`` training sets, fit, and compare the bound with a held-out risk estimate."""
    problem = problem if problem is not None else LinearBoundProblem()
    report = BoundReport(delta, n, problem.M, problem.L, resamples)
    x_pop, y_pop = problem.sample(named_rng(seed, "data", "holdout"), holdout)
    for r in range(resamples):
        x, y = problem.sample(named_rng(seed, "data", r), n)
        w = problem.fit(x, y, named_rng(seed, "fit", r))
        emp = _fmean(problem.loss(w, x, y))
        hyps = problem.hypothesis_sample(w, named_rng(seed, "hypotheses", r))
        sign_rng = named_rng(seed, "rademacher", r)
        est = empirical_rademacher(problem.scores(hyps, x), draws, sign_rng)
        sigma = named_rng(seed, "rademacher", r).choice(np.array([-1.0, 1.0]), size=(draws, n))
        full = problem.class_rademacher(x, sigma)
        report.empirical_risk.append(emp)
        report.rademacher.append(est.value)
        report.rademacher_class.append(full)
        report.bound.append(bound_value(emp, est.value, problem.L, problem.M, n, delta))
        report.bound_class.append(bound_value(emp, full, problem.L, problem.M, n, delta))
        report.population_risk.append(_fmean(problem.loss(w, x_pop, y_pop)))
    return report

