"""A sampled glimpse sequence and its gradient replay hooks.

A Trajectory records, for one sampled action sequence: the actions and
observations, per-step log-probabilities under the prior and the proposal,
and the label log-likelihood. It also carries closures that re-seed the
retained computation tape, so estimators can accumulate
``c_lik * d(log p(y|a)) + c_prior * d(log p(a))`` into theta's gradients
(and ``c * d(log q(a|y))`` into eta's) without re-running the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    actions: list
    step_log_prior: np.ndarray
    step_log_proposal: np.ndarray
    log_likelihood: float
    observations: list = field(default_factory=list)
    class_probs: np.ndarray | None = None
    # hooks
    _grad_theta: object = None
    _grad_eta: object = None
    _grad_explore: object = None
    # head values kept for exploration/diagnostics
    scale_entropies: np.ndarray | None = None
    loc_means: np.ndarray | None = None

    @property
    def log_prior(self) -> float:
        return float(np.sum(self.step_log_prior))

    @property
    def log_proposal(self) -> float:
        return float(np.sum(self.step_log_proposal))

    def log_weight(self) -> float:
        return self.log_prior + self.log_likelihood - self.log_proposal

    def grad_theta(self, coef_lik: float, coef_prior: float) -> None:
        """Accumulate coef_lik * grad(log p(y|a)) + coef_prior * grad(log p(a))."""
        self._grad_theta(float(coef_lik), float(coef_prior))

    def grad_eta(self, coef: float) -> None:
        """Accumulate coef * grad(log q(a|y)) into the proposal's parameters."""
        if self._grad_eta is None:
            raise RuntimeError("trajectory has no proposal-gradient hook")
        self._grad_eta(float(coef))

    def grad_explore(self, entropy_coef: float, loc_seeds=None) -> None:
        """Accumulate entropy-ascent seeds (and location-mean seeds) into theta."""
        if self._grad_explore is not None:
            self._grad_explore(float(entropy_coef), loc_seeds)
