"""Fully discrete toy environments with analytically specified likelihoods.

These worlds make every posterior, bound, and gradient exactly computable
by enumeration, which is what the oracle module and the estimator tests
run against. Actions are flat indices a in [0, K*S): cell = a // S,
scale = a % S. The label likelihood of a sequence is the normalized
product of per-cell class tables, so for one glimpse it reduces to the
table row itself.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .diffnet import ParameterVector, logsumexp, softmax
from .errors import ConfigurationError, EnumerationBudgetError
from .trajectory import Trajectory

LOGIT_FLOOR = -700.0  # log of a probability-zero table entry, still finite


@dataclass
class ToyWorld:
    num_cells: int
    num_scales: int
    num_glimpses: int
    tables: np.ndarray  # (num_cells, num_classes) rows of p(y | cell)

    @property
    def num_actions(self) -> int:
        return self.num_cells * self.num_scales

    @property
    def num_classes(self) -> int:
        return self.tables.shape[1]

    def sequences(self, budget: int = 10**6) -> list[tuple[int, ...]]:
        count = self.num_actions ** self.num_glimpses
        if count > budget:
            raise EnumerationBudgetError(
                f"{count} sequences exceed enumeration budget {budget}")
        return list(itertools.product(range(self.num_actions), repeat=self.num_glimpses))

    def cells(self, seq) -> list[int]:
        return [a // self.num_scales for a in seq]


def make_toy_world(num_cells: int, num_scales: int, tables,
                   num_glimpses: int = 1) -> ToyWorld:
    tables = np.asarray(tables, dtype=np.float64)
    if tables.ndim != 2 or tables.shape[0] != num_cells:
        raise ConfigurationError("tables must be (num_cells, num_classes)")
    if np.any(tables < 0) or not np.allclose(tables.sum(axis=1), 1.0, atol=1e-9):
        raise ConfigurationError("every table row must be a distribution")
    return ToyWorld(num_cells, num_scales, num_glimpses, tables)


def random_toy_world(rng: np.random.Generator, max_cells: int = 3,
                     max_classes: int = 3, num_glimpses: int = 1,
                     num_scales: int = 1) -> ToyWorld:
    k = int(rng.integers(2, max_cells + 1))
    c = int(rng.integers(2, max_classes + 1))
    tables = rng.dirichlet(np.ones(c), size=k)
    return make_toy_world(k, num_scales, tables, num_glimpses)


def _safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(np.asarray(p, dtype=np.float64), np.exp(LOGIT_FLOOR)))


class TabularAttentionModel:
    """Toy stand-in for the prediction network: logit tables, exact gradients.

    Parameters are per-step prior logits (N, A) and per-cell class logits
    (K, C); log p(y|a) = log softmax over y of the summed class logits of
    the visited cells.
    """

    def __init__(self, world: ToyWorld, prior_logits, lik_logits):
        self.world = world
        self.pv = ParameterVector()
        self.pv.register("prior.logits", (world.num_glimpses, world.num_actions),
                         np.asarray(prior_logits, dtype=np.float64))
        self.pv.register("lik.logits", (world.num_cells, world.num_classes),
                         np.asarray(lik_logits, dtype=np.float64))

    @classmethod
    def from_tables(cls, world: ToyWorld, prior_probs) -> "TabularAttentionModel":
        prior = np.broadcast_to(np.asarray(prior_probs, dtype=np.float64),
                                (world.num_glimpses, world.num_actions))
        return cls(world, _safe_log(prior), _safe_log(world.tables))

    @classmethod
    def random(cls, world: ToyWorld, rng: np.random.Generator,
               scale: float = 1.0) -> "TabularAttentionModel":
        return cls(world,
                   scale * rng.standard_normal((world.num_glimpses, world.num_actions)),
                   scale * rng.standard_normal((world.num_cells, world.num_classes)))

    @property
    def prior_logits(self) -> np.ndarray:
        return self.pv["prior.logits"].value

    @property
    def lik_logits(self) -> np.ndarray:
        return self.pv["lik.logits"].value

    def step_log_prior(self, seq) -> np.ndarray:
        z = self.prior_logits
        return np.array([z[n, a] - logsumexp(z[n]) for n, a in enumerate(seq)])

    def log_likelihood(self, y: int, seq) -> float:
        s = self.lik_logits[self.world.cells(seq)].sum(axis=0)
        return float(s[y] - logsumexp(s))

    def class_probs(self, seq) -> np.ndarray:
        return softmax(self.lik_logits[self.world.cells(seq)].sum(axis=0))

    def sample_prior(self, rng: np.random.Generator) -> tuple[int, ...]:
        z = self.prior_logits
        return tuple(int(rng.choice(z.shape[1], p=softmax(z[n])))
                     for n in range(z.shape[0]))

    def _accumulate_theta(self, y: int, seq, coef_lik: float, coef_prior: float) -> None:
        prior_g = self.pv["prior.logits"]
        lik_g = self.pv["lik.logits"]
        z = self.prior_logits
        gp = np.zeros(prior_g.shape)
        for n, a in enumerate(seq):
            gp[n] -= softmax(z[n])
            gp[n, a] += 1.0
        prior_g.add_grad(coef_prior * gp)
        cells = self.world.cells(seq)
        s = self.lik_logits[cells].sum(axis=0)
        gl_row = -softmax(s)
        gl_row[y] += 1.0
        gl = np.zeros(lik_g.shape)
        for cell in cells:
            gl[cell] += coef_lik * gl_row
        lik_g.add_grad(gl)


class SequenceProposal:
    """Tabular proposal over whole action sequences, conditioned on the label.

    Logits have shape (num_classes, num_sequences). Distributions over full
    sequences can represent the exact posterior for any glimpse count,
    which the estimator identity tests rely on.
    """

    def __init__(self, world: ToyWorld, logits):
        self.world = world
        self.seqs = world.sequences()
        self.index = {s: i for i, s in enumerate(self.seqs)}
        self.pv = ParameterVector()
        self.pv.register("q.logits", (world.num_classes, len(self.seqs)),
                         np.asarray(logits, dtype=np.float64))

    @classmethod
    def uniform(cls, world: ToyWorld) -> "SequenceProposal":
        n = world.num_actions ** world.num_glimpses
        return cls(world, np.zeros((world.num_classes, n)))

    @classmethod
    def from_probs(cls, world: ToyWorld, probs_by_class) -> "SequenceProposal":
        return cls(world, _safe_log(probs_by_class))

    @classmethod
    def random(cls, world: ToyWorld, rng: np.random.Generator,
               scale: float = 1.0) -> "SequenceProposal":
        n = world.num_actions ** world.num_glimpses
        return cls(world, scale * rng.standard_normal((world.num_classes, n)))

    @property
    def logits(self) -> np.ndarray:
        return self.pv["q.logits"].value

    def log_prob(self, y: int, seq) -> float:
        z = self.logits[y]
        return float(z[self.index[tuple(seq)]] - logsumexp(z))

    def probs(self, y: int) -> np.ndarray:
        return softmax(self.logits[y])

    def sample(self, y: int, rng: np.random.Generator) -> tuple[int, ...]:
        return self.seqs[int(rng.choice(len(self.seqs), p=self.probs(y)))]

    def _accumulate_eta(self, y: int, seq, coef: float) -> None:
        g = np.zeros(self.pv["q.logits"].shape)
        g[y] = -softmax(self.logits[y])
        g[y, self.index[tuple(seq)]] += 1.0
        self.pv["q.logits"].add_grad(coef * g)


def force_trajectory(model: TabularAttentionModel, y: int, seq,
                     proposal: SequenceProposal | None = None) -> Trajectory:
    """Build the trajectory for a fixed action sequence (no sampling)."""
    seq = tuple(seq)
    slp = model.step_log_prior(seq)
    if proposal is None:
        slq = slp.copy()
    else:
        slq = np.zeros(len(seq))
        slq[0] = proposal.log_prob(y, seq)
    traj = Trajectory(
        actions=list(seq),
        step_log_prior=slp,
        step_log_proposal=slq,
        log_likelihood=model.log_likelihood(y, seq),
        class_probs=model.class_probs(seq),
        _grad_theta=lambda cl, cp: model._accumulate_theta(y, seq, cl, cp),
        _grad_eta=(None if proposal is None
                   else lambda c: proposal._accumulate_eta(y, seq, c)),
    )
    return traj


def rollout_toy_prior(model: TabularAttentionModel, y: int,
                      rng: np.random.Generator) -> Trajectory:
    return force_trajectory(model, y, model.sample_prior(rng))


def rollout_toy_proposal(model: TabularAttentionModel, proposal: SequenceProposal,
                         y: int, rng: np.random.Generator) -> Trajectory:
    return force_trajectory(model, y, proposal.sample(y, rng), proposal)
