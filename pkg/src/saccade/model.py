"""Prediction and inference networks, environments, and trajectory rollouts.

The prediction network is a two-layer ReLU recurrent core. The
low-resolution context view initializes only the second (top) layer's
state, and the class prediction reads only the first layer's final state,
so nothing flows directly from the context view to the output. Action
heads (location, scale) read the top layer; the inference network stacks
its own recurrent layer on read-only copies of those top-layer states plus
a label embedding, so its gradients never reach the prediction network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from .errors import ConfigurationError
from .glimpse import Action, extract_glimpse, low_res_view
from .trajectory import Trajectory


@dataclass
class ModelConfig:
    glimpses: int
    num_classes: int
    num_scales: int
    retina: int = 14
    lowres_side: int = 14
    loc_mode: str = "continuous"     # or "discrete"
    num_cells: int = 0               # discrete mode only
    w1: int = 128
    w2: int = 128
    wq: int = 128
    embed_dim: int = 16
    loc_log_std: float = math.log(0.1)
    feed_action: bool = True         # append the chosen action to the patch input
    toy_obs_dim: int = 0             # toy worlds: one-hot size, overrides retina

    def __post_init__(self):
        if self.loc_mode not in ("continuous", "discrete"):
            raise ConfigurationError(f"unknown location mode {self.loc_mode!r}")
        if self.loc_mode == "discrete" and self.num_cells <= 0:
            raise ConfigurationError("discrete location mode needs num_cells > 0")

    @property
    def loc_dim(self) -> int:
        return 2 if self.loc_mode == "continuous" else self.num_cells

    @property
    def obs_dim(self) -> int:
        if self.toy_obs_dim:
            return self.toy_obs_dim
        base = self.retina * self.retina
        if self.feed_action:
            base += (2 if self.loc_mode == "continuous" else 0) + self.num_scales
        return base

    @property
    def lowres_dim(self) -> int:
        return 1 if self.toy_obs_dim else self.lowres_side * self.lowres_side


class PredictionNetwork:
    """Recurrent attention policy plus classifier (parameter vector theta)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.pv = dn.ParameterVector()
        self.specs = {
            "lowres": dn.LayerSpec("dense", cfg.lowres_dim, cfg.w2, "relu"),
            "l1": dn.LayerSpec("recurrent-cell", cfg.obs_dim, cfg.w1, "relu"),
            "l2": dn.LayerSpec("recurrent-cell", cfg.w1, cfg.w2, "relu"),
            "loc": dn.LayerSpec(
                "gaussian-head" if cfg.loc_mode == "continuous" else "categorical-head",
                cfg.w2, cfg.loc_dim),
            "scale": dn.LayerSpec("categorical-head", cfg.w2, cfg.num_scales),
            "cls": dn.LayerSpec("categorical-head", cfg.w1, cfg.num_classes),
        }
        self.pv.register_dense("lowres", cfg.lowres_dim, cfg.w2, rng)
        self.pv.register_recurrent("l1", cfg.obs_dim, cfg.w1, rng)
        self.pv.register_recurrent("l2", cfg.w1, cfg.w2, rng)
        self.pv.register_dense("loc", cfg.w2, cfg.loc_dim, rng)
        self.pv.register_dense("scale", cfg.w2, cfg.num_scales, rng)
        self.pv.register_dense("cls", cfg.w1, cfg.num_classes, rng)
        self.loc_log_std = np.full(2, cfg.loc_log_std)

    def initial_state(self, tape: dn.Tape, lowres_vec: np.ndarray):
        h2, _ = dn.forward(self.specs["lowres"], self.pv, "lowres", lowres_vec, tape)
        h1 = np.zeros(self.cfg.w1)
        return h1, h2

    def step(self, tape: dn.Tape, h1, h2, obs_vec: np.ndarray):
        h1, _ = dn.forward(self.specs["l1"], self.pv, "l1", obs_vec, tape, state=h1)
        h2, _ = dn.forward(self.specs["l2"], self.pv, "l2", h1, tape, state=h2)
        return h1, h2

    def action_heads(self, tape: dn.Tape, h2):
        loc, _ = dn.forward(self.specs["loc"], self.pv, "loc", h2, tape)
        scale, _ = dn.forward(self.specs["scale"], self.pv, "scale", h2, tape)
        return loc, scale

    def class_logits(self, tape: dn.Tape, h1):
        out, _ = dn.forward(self.specs["cls"], self.pv, "cls", h1, tape)
        return out


class InferenceNetwork:
    """Label-conditioned proposal over glimpses (parameter vector eta)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        in_dim = cfg.embed_dim + cfg.w2
        self.pv = dn.ParameterVector()
        lim = math.sqrt(6.0 / (cfg.num_classes + cfg.embed_dim))
        self.pv.register("embed", (cfg.num_classes, cfg.embed_dim),
                         rng.uniform(-lim, lim, (cfg.num_classes, cfg.embed_dim)))
        self.pv.register_recurrent("q", in_dim, cfg.wq, rng)
        self.pv.register_dense("qloc", cfg.wq, cfg.loc_dim, rng)
        self.pv.register_dense("qscale", cfg.wq, cfg.num_scales, rng)
        self.spec_q = dn.LayerSpec("recurrent-cell", in_dim, cfg.wq, "relu")
        self.spec_loc = dn.LayerSpec(
            "gaussian-head" if cfg.loc_mode == "continuous" else "categorical-head",
            cfg.wq, cfg.loc_dim)
        self.spec_scale = dn.LayerSpec("categorical-head", cfg.wq, cfg.num_scales)
        self.loc_log_std = np.full(2, cfg.loc_log_std)

    def initial_state(self) -> np.ndarray:
        return np.zeros(self.cfg.wq)

    def step(self, tape: dn.Tape, hq, label: int, h2_value: np.ndarray):
        emb = dn.embedding_row(tape, self.pv["embed"], label)
        # h2 enters as a plain value: wake-q gradients must not reach theta
        x = _concat(tape, emb, np.asarray(h2_value))
        hq, _ = dn.forward(self.spec_q, self.pv, "q", x, tape, state=hq)
        loc, _ = dn.forward(self.spec_loc, self.pv, "qloc", hq, tape)
        scale, _ = dn.forward(self.spec_scale, self.pv, "qscale", hq, tape)
        return hq, loc, scale


def _concat(tape: dn.Tape, a, b_const: np.ndarray):
    av = dn.value_of(a)
    out = np.concatenate([av, b_const])
    n = len(av)
    return tape.emit(out, (a,), lambda go: (go[:n],))


# ---------------------------------------------------------------------------
# environments

class ImageEnv:
    """Glimpse interface over a single canvas image."""

    def __init__(self, image: np.ndarray, scales, cfg: ModelConfig):
        self.image = image
        self.scales = tuple(scales)
        self.cfg = cfg

    def lowres(self) -> np.ndarray:
        return low_res_view(self.image, self.cfg.lowres_side).ravel()

    def observe(self, action: Action):
        obs = extract_glimpse(self.image, action, self.scales, self.cfg.retina)
        parts = [obs.flat]
        if self.cfg.feed_action:
            loc = np.clip(np.asarray(action.location, dtype=np.float64), -1.0, 1.0)
            onehot = np.zeros(self.cfg.num_scales)
            onehot[action.scale_index] = 1.0
            parts += [loc, onehot]
        return np.concatenate(parts), obs


class ToyEnv:
    """Discrete-world env: observations are one-hot action indicators."""

    def __init__(self, world, cfg: ModelConfig):
        self.world = world
        self.cfg = cfg

    def lowres(self) -> np.ndarray:
        return np.zeros(1)

    def observe(self, action: Action):
        a = int(action.location) * self.world.num_scales + action.scale_index
        vec = np.zeros(self.world.num_actions)
        vec[a] = 1.0
        return vec, None


# ---------------------------------------------------------------------------
# rollouts

def _entropy_seed(logits: np.ndarray) -> np.ndarray:
    lp = logits - dn.logsumexp(logits)
    p = np.exp(lp)
    h = -np.sum(p * lp)
    return -p * (lp + h)


def _rollout(pnet: PredictionNetwork, env, rng, label=None, qnet=None,
             tau: float = 1.0, forced_actions=None) -> Trajectory:
    cfg = pnet.cfg
    tape = dn.Tape()
    tape_q = dn.Tape() if qnet is not None else None
    h1, h2 = pnet.initial_state(tape, env.lowres())
    hq = qnet.initial_state() if qnet is not None else None

    actions, observations = [], []
    lp_nodes, lq_nodes = [], []
    step_lp = np.zeros(cfg.glimpses)
    step_lq = np.zeros(cfg.glimpses)
    scale_logit_nodes, loc_nodes = [], []
    scale_entropies = np.zeros(cfg.glimpses)
    loc_means = np.zeros((cfg.glimpses, 2)) if cfg.loc_mode == "continuous" else None

    for n in range(cfg.glimpses):
        p_loc, p_scale = pnet.action_heads(tape, h2)
        if qnet is not None:
            hq, q_loc, q_scale = qnet.step(tape_q, hq, label, h2.value)
            samp_loc_node, samp_scale_node = q_loc, q_scale
            samp_log_std = qnet.loc_log_std
        else:
            samp_loc_node, samp_scale_node = p_loc, p_scale
            samp_log_std = pnet.loc_log_std

        if cfg.loc_mode == "continuous":
            loc_dist = dn.Gaussian(samp_loc_node.value, samp_log_std)
        else:
            loc_dist = dn.Categorical(samp_loc_node.value)
        scale_dist = dn.Categorical(samp_scale_node.value)
        if tau != 1.0:
            loc_dist = dn.temperature_scaled(loc_dist, tau)
            scale_dist = dn.temperature_scaled(scale_dist, tau)

        if forced_actions is not None:
            action = forced_actions[n]
        else:
            action = Action(location=dn.sample(loc_dist, rng),
                            scale_index=dn.sample(scale_dist, rng))
        actions.append(action)

        # per-step log-probs: prior (tape nodes), proposal (sampling density)
        if cfg.loc_mode == "continuous":
            lp_nodes.append(dn.gaussian_logprob(tape, p_loc, pnet.loc_log_std,
                                                action.location))
        else:
            lp_nodes.append(dn.categorical_logprob(tape, p_loc, int(action.location)))
        lp_nodes.append(dn.categorical_logprob(tape, p_scale, action.scale_index))
        step_lp[n] = lp_nodes[-2].value + lp_nodes[-1].value

        if qnet is not None:
            if cfg.loc_mode == "continuous":
                lq_nodes.append(dn.gaussian_logprob(tape_q, q_loc, qnet.loc_log_std,
                                                    action.location))
            else:
                lq_nodes.append(dn.categorical_logprob(tape_q, q_loc, int(action.location)))
            lq_nodes.append(dn.categorical_logprob(tape_q, q_scale, action.scale_index))
            step_lq[n] = (dn.log_prob(loc_dist, action.location)
                          + dn.log_prob(scale_dist, action.scale_index))
        else:
            step_lq[n] = (dn.log_prob(loc_dist, action.location)
                          + dn.log_prob(scale_dist, action.scale_index))

        scale_logit_nodes.append(samp_scale_node if qnet is None else p_scale)
        loc_nodes.append(p_loc)
        scale_entropies[n] = dn.Categorical(p_scale.value).entropy()
        if loc_means is not None:
            loc_means[n] = p_loc.value

        obs_vec, obs = env.observe(action)
        observations.append(obs)
        h1, h2 = pnet.step(tape, h1, h2, obs_vec)

    cls = pnet.class_logits(tape, h1)
    class_probs = dn.softmax(cls.value)
    if label is not None:
        lik_node = dn.categorical_logprob(tape, cls, int(label))
        loglik = lik_node.value
    else:
        lik_node, loglik = None, 0.0

    def grad_theta(coef_lik, coef_prior):
        seeds = [(n, coef_prior) for n in lp_nodes]
        if lik_node is not None and coef_lik != 0.0:
            seeds.append((lik_node, coef_lik))
        tape.backward(seeds)

    def grad_eta(coef):
        tape_q.backward([(n, coef) for n in lq_nodes])

    def grad_explore(entropy_coef, loc_seeds):
        seeds = []
        if entropy_coef != 0.0:
            for node in scale_logit_nodes:
                seeds.append((node, entropy_coef * _entropy_seed(node.value)))
            if cfg.loc_mode == "discrete":
                for node in loc_nodes:
                    seeds.append((node, entropy_coef * _entropy_seed(node.value)))
        if loc_seeds is not None and cfg.loc_mode == "continuous":
            for node, s in zip(loc_nodes, loc_seeds):
                seeds.append((node, np.asarray(s)))
        if seeds:
            tape.backward(seeds)

    return Trajectory(
        actions=actions,
        step_log_prior=step_lp,
        step_log_proposal=step_lq,
        log_likelihood=loglik,
        observations=observations,
        class_probs=class_probs,
        _grad_theta=grad_theta,
        _grad_eta=grad_eta if qnet is not None else None,
        _grad_explore=grad_explore,
        scale_entropies=scale_entropies,
        loc_means=loc_means,
    )


def rollout_prior(pnet: PredictionNetwork, env, rng: np.random.Generator,
                  label=None, tau: float = 1.0) -> Trajectory:
    """Sample a trajectory from the attention prior (proposal := prior)."""
    return _rollout(pnet, env, rng, label=label, tau=tau)


def rollout_proposal(pnet: PredictionNetwork, qnet: InferenceNetwork, env,
                     label: int, rng: np.random.Generator,
                     tau: float = 1.0) -> Trajectory:
    """Sample from the inference network; prior and likelihood under theta."""
    return _rollout(pnet, env, rng, label=label, qnet=qnet, tau=tau)


def rollout_forced(pnet: PredictionNetwork, env, actions, label=None,
                   qnet: InferenceNetwork | None = None) -> Trajectory:
    """Replay a fixed action sequence deterministically (oracle harness)."""
    return _rollout(pnet, env, None, label=label, qnet=qnet, forced_actions=actions)


def classify(pnet: PredictionNetwork, env, rollouts: int,
             rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Average the class distribution over prior rollouts; argmax wins."""
    if rollouts < 1:
        raise ConfigurationError("need at least one evaluation rollout")
    avg = np.zeros(pnet.cfg.num_classes)
    for _ in range(rollouts):
        avg += _rollout(pnet, env, rng).class_probs
    avg /= rollouts
    return int(np.argmax(avg)), avg
