"""Gradient estimators, importance weights, bounds, and diagnostics.

All weight arithmetic stays in log space with log-sum-exp normalization;
probability-space formulas underflow after a few glimpses. Estimator
functions accumulate additively into the owning parameter vector's grads
(callers zero between invocations) and return a GradientEstimate holding a
copy of this call's contribution.

Estimator tags:
  VAR, VAR+c            multi-sample policy-gradient on the variational bound
  WSRAM, WSRAM+c        self-normalized importance sampling, prior proposal
  WSRAM+q, WSRAM+q+c    same, proposing from the inference network
  WAKE-Q, WAKE-Q+c      inference-network update toward the glimpse posterior
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateWeightsError

log = logging.getLogger(__name__)

ESTIMATOR_TAGS = ("VAR", "VAR+c", "WSRAM", "WSRAM+c", "WSRAM+q", "WSRAM+q+c",
                  "WAKE-Q", "WAKE-Q+c")
LOG_ZERO_SENTINEL = -1e30


def needs_inference_net(tag: str) -> bool:
    return tag in ("WSRAM+q", "WSRAM+q+c", "WAKE-Q", "WAKE-Q+c")


def uses_control_variates(tag: str) -> bool:
    return tag.endswith("+c")


def family(tag: str) -> str:
    if tag not in ESTIMATOR_TAGS:
        raise ConfigurationError(f"unknown estimator tag {tag!r}")
    if tag.startswith("VAR"):
        return "var"
    if tag.startswith("WSRAM"):
        return "wsram"
    return "wakeq"


@dataclass
class ImportanceWeightSet:
    log_raw: np.ndarray
    normalized: np.ndarray

    @property
    def raw(self) -> np.ndarray:
        return np.exp(self.log_raw)

    @property
    def sample_count(self) -> int:
        return len(self.log_raw)


@dataclass
class GradientEstimate:
    grad: np.ndarray
    tag: str
    sample_count: int
    diagnostics: dict = field(default_factory=dict)


@dataclass
class DiagnosticRecord:
    ess: float
    mean_log_weight: float
    bound_f: float
    bound_lm: float
    gradient_variance: float | None = None


def _normalize_log(logw: np.ndarray) -> np.ndarray:
    m = logw.max()
    if not np.isfinite(m):
        raise DegenerateWeightsError("all importance weights are zero")
    e = np.exp(logw - m)
    return e / e.sum()


def importance_weights(trajs) -> ImportanceWeightSet:
    """Unnormalized log weights log p(a) + log p(y|a) - log q(a|y), normalized."""
    if len(trajs) < 1:
        raise ConfigurationError("need at least one trajectory")
    logw = np.array([t.log_weight() for t in trajs])
    return ImportanceWeightSet(log_raw=logw, normalized=_normalize_log(logw))


def ess(weights: ImportanceWeightSet) -> float:
    """Effective sample size 1 / sum of squared normalized weights."""
    return float(1.0 / np.sum(weights.normalized**2))


def bound_estimates(weights: ImportanceWeightSet) -> dict[str, float]:
    """Single-sample bound (mean log w) and multi-sample bound (log mean w)."""
    logw = weights.log_raw.copy()
    if np.any(~np.isfinite(logw)):
        log.warning("zero importance weight; clamping to sentinel")
        logw = np.maximum(logw, LOG_ZERO_SENTINEL)
    m = logw.max()
    l_m = float(m + np.log(np.mean(np.exp(logw - m))))
    return {"F_hat": float(np.mean(logw)), "L_M_hat": l_m}


def _capture(pv, accumulate) -> np.ndarray:
    """Run an accumulation and return just its contribution to pv.grads."""
    before = pv.grads.copy()
    pv.grads[:] = 0.0
    accumulate()
    out = pv.grads.copy()
    pv.grads[:] = before + out
    return out


# ---------------------------------------------------------------------------
# variational (policy-gradient) estimators, prior rollouts

def variational_gradient(trajs, pnet) -> GradientEstimate:
    """Mean over samples of grad log-lik + log-lik-weighted prior score."""
    m = len(trajs)
    if m < 1:
        raise ConfigurationError("need at least one trajectory")

    def acc():
        for t in trajs:
            t.grad_theta(1.0 / m, t.log_likelihood / m)

    return GradientEstimate(_capture(pnet.pv, acc), "VAR", m)


def variational_gradient_cv(trajs, pnet, baseline=None) -> GradientEstimate:
    """Variational estimator with a reward baseline on the prior-score term."""
    m = len(trajs)
    if m < 1:
        raise ConfigurationError("need at least one trajectory")
    b = 0.0 if baseline is None else baseline.value(trajs)

    def acc():
        for t in trajs:
            t.grad_theta(1.0 / m, (t.log_likelihood - b) / m)

    out = GradientEstimate(_capture(pnet.pv, acc), "VAR+c", m,
                           diagnostics={"baseline": float(b)})
    if baseline is not None:
        baseline.update(trajs)
    return out


class MovingAverageBaseline:
    """Exponential moving average of the log-likelihood (squared-error fit)."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self._value = 0.0
        self._initialized = False

    def value(self, trajs) -> float:
        return self.peek(float(np.mean([t.log_likelihood for t in trajs])))

    def update(self, trajs) -> None:
        self.update_mean(float(np.mean([t.log_likelihood for t in trajs])))

    def peek(self, fallback: float = 0.0) -> float:
        return self._value if self._initialized else fallback

    def update_mean(self, target: float) -> None:
        if not self._initialized:
            self._value = target
            self._initialized = True
        else:
            self._value = self.decay * self._value + (1 - self.decay) * target


class PerClassBaseline:
    """Learned per-label scalar baseline, fit online by squared error."""

    def __init__(self, num_classes: int, lr: float = 0.05):
        self.b = np.zeros(num_classes)
        self.seen = np.zeros(num_classes, dtype=bool)
        self.lr = lr
        self._label = None

    def bind(self, label: int) -> "PerClassBaseline":
        self._label = int(label)
        return self

    def value(self, trajs) -> float:
        y = self._label
        if y is None or not self.seen[y]:
            return float(np.mean([t.log_likelihood for t in trajs]))
        return float(self.b[y])

    def update(self, trajs) -> None:
        y = self._label
        if y is None:
            return
        target = float(np.mean([t.log_likelihood for t in trajs]))
        if not self.seen[y]:
            self.b[y] = target
            self.seen[y] = True
        else:
            self.b[y] += self.lr * (target - self.b[y])


# ---------------------------------------------------------------------------
# importance-sampled estimators, proposal rollouts

def wsram_theta_gradient(trajs, weights: ImportanceWeightSet, pnet,
                         tag: str = "WSRAM") -> GradientEstimate:
    """Normalized-weight sum of likelihood score plus prior score."""

    def acc():
        for t, w in zip(trajs, weights.normalized):
            t.grad_theta(w, w)

    return GradientEstimate(_capture(pnet.pv, acc), tag, weights.sample_count)


def wsram_theta_gradient_cv(trajs, weights: ImportanceWeightSet, pnet,
                            tag: str = "WSRAM+c") -> GradientEstimate:
    """Prior-score coefficient becomes (w_hat - v_hat), with v_hat the
    self-normalized prior/proposal ratio over the same samples."""
    log_ratio = np.array([t.log_prior - t.log_proposal for t in trajs])
    v_hat = _normalize_log(log_ratio)

    def acc():
        for t, w, v in zip(trajs, weights.normalized, v_hat):
            t.grad_theta(w, w - v)

    return GradientEstimate(_capture(pnet.pv, acc), tag, weights.sample_count,
                            diagnostics={"v_hat": v_hat})


def wake_q_gradient(trajs, weights: ImportanceWeightSet, qnet) -> GradientEstimate:
    """Posterior-weighted proposal score; estimates the KL(p||q) gradient
    (sign: ascend this to reduce the divergence)."""

    def acc():
        for t, w in zip(trajs, weights.normalized):
            t.grad_eta(w)

    return GradientEstimate(_capture(qnet.pv, acc), "WAKE-Q", weights.sample_count)


def wake_q_gradient_cv(trajs, weights: ImportanceWeightSet, qnet) -> GradientEstimate:
    """Same with reward baseline 1/M: coefficients (w_hat - 1/M)."""
    m = weights.sample_count
    base = 1.0 / m
    # mutation hook for verify tooling: rescaling the coefficients shifts
    # the estimator mean, which the identity checks must catch
    scale = 0.5 if os.environ.get("SACCADE_MUTATE_WAKEQ_CV") else 1.0

    def acc():
        for t, w in zip(trajs, weights.normalized):
            t.grad_eta(scale * (w - base))

    return GradientEstimate(_capture(qnet.pv, acc), "WAKE-Q+c", m)


# ---------------------------------------------------------------------------
# diagnostics

def diagnostic_record(weights: ImportanceWeightSet,
                      gradient_variance: float | None = None) -> DiagnosticRecord:
    bounds = bound_estimates(weights)
    return DiagnosticRecord(
        ess=ess(weights),
        mean_log_weight=float(np.mean(np.maximum(weights.log_raw, LOG_ZERO_SENTINEL))),
        bound_f=bounds["F_hat"],
        bound_lm=bounds["L_M_hat"],
        gradient_variance=gradient_variance,
    )


def gradient_variance_probe(sample_gradient, resamples: int) -> float:
    """Mean per-coordinate empirical variance across independent estimates.

    ``sample_gradient(r)`` must return the r-th independent gradient
    estimate as a flat array (deterministic in r given the fixture).
    """
    if resamples < 2:
        raise ConfigurationError("variance probe needs at least two resamples")
    s = None
    ss = None
    for r in range(resamples):
        g = sample_gradient(r)
        if s is None:
            s = np.zeros_like(g)
            ss = np.zeros_like(g)
        s += g
        ss += g * g
    var = ss / resamples - (s / resamples) ** 2
    return float(np.mean(np.maximum(var, 0.0)) * resamples / (resamples - 1))
