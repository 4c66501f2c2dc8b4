"""Wake-sleep training loop: config, Adam, the trainer, metrics, checkpoints.

One train step draws a minibatch, rolls out M action sequences per
example (from the inference network for the importance-sampled
estimators, from the policy itself otherwise), turns the estimator's
per-rollout coefficients into parameter gradients, and applies Adam to
the prediction parameters (and, when the estimator uses it, the
inference parameters). Metrics stream to a JSONL file; checkpoints are
versioned .npz archives that resume bit-exactly because all randomness
derives from (seed, stream name, update index).
"""

from __future__ import annotations

import collections
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from . import model as md
from .errors import (ConfigurationError, DegenerateTrainingError, InputFormatError)
from .fastpath import BatchedEngine
from .glimpse import read_dataset
from .oracle import exact_marginal, tabular_forcer
from .rng import substream
from .toy import (SequenceProposal, TabularAttentionModel, make_toy_world,
                  rollout_toy_prior, rollout_toy_proposal)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SKIP_WINDOW = 1000
SKIP_ABORT_FRACTION = 0.10


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DataConfig:
    train_set: str = ""
    test_set: str = ""
    canvas: int = 60
    retina: int = 14
    lowres_side: int = 14
    scales: list = field(default_factory=lambda: [20.0, 40.0, 60.0])
    num_classes: int = 10


@dataclass
class NetConfig:
    glimpses: int = 4
    w1: int = 128
    w2: int = 128
    wq: int = 128
    embed_dim: int = 16
    loc_log_std: float = math.log(0.1)


@dataclass
class ToyConfig:
    num_cells: int = 3
    num_scales: int = 1
    num_glimpses: int = 1
    num_classes: int = 2
    world_seed: int = 0


@dataclass
class TrainConfig:
    estimator: str = "WSRAM+q+c"
    samples: int = 5
    batch: int = 32
    updates: int = 50000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau: float = 1.5
    tau_anneal_frac: float = 0.1
    lambda_cov: float = 0.0
    lambda_ent: float = 0.0
    seed: int = 0
    eval_rollouts: int = 4
    eval_examples: int = 1000
    metrics_every: int = 100
    checkpoint_every: int = 5000
    workers: int = 0  # reserved; rollouts are vectorized in-process


@dataclass
class ExperimentConfig:
    mode: str = "image"  # or "toy"
    run_id: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    model: NetConfig = field(default_factory=NetConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        t = self.train
        if self.mode not in ("image", "toy"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if t.estimator not in est.ESTIMATOR_TAGS:
            raise ConfigurationError(f"unknown estimator tag {t.estimator!r}")
        if self.model.glimpses < 1 or self.toy.num_glimpses < 1:
            raise ConfigurationError("need at least one glimpse")
        if t.samples < 1:
            raise ConfigurationError("need at least one sample per example")
        if t.tau <= 0:
            raise ConfigurationError("temperature must be positive")
        if t.lambda_cov < 0 or t.lambda_ent < 0:
            raise ConfigurationError("exploration weights must be nonnegative")
        if t.batch < 1 or t.updates < 0:
            raise ConfigurationError("batch must be >= 1 and updates >= 0")
        if not 0.0 <= t.tau_anneal_frac <= 1.0:
            raise ConfigurationError("tau_anneal_frac must be in [0, 1]")


def _from_dict(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown config key(s) at {path or 'top level'}: "
                                 + ", ".join(sorted(unknown)))
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        if dataclasses.is_dataclass(_RESOLVED.get(ftype, ftype)):
            sub = _RESOLVED.get(ftype, ftype)
            if not isinstance(value, dict):
                raise ConfigurationError(f"config section {path}{name} must be an object")
            kwargs[name] = _from_dict(sub, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_RESOLVED = {"DataConfig": DataConfig, "NetConfig": NetConfig,
             "ToyConfig": ToyConfig, "TrainConfig": TrainConfig}


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str, overrides=()) -> ExperimentConfig:
    """Parse a JSON config file, then apply dotted key=value overrides."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")
    apply_overrides(data, overrides)
    return config_from_dict(data)


def apply_overrides(data: dict, overrides) -> None:
    """Apply `section.key=value` strings onto a nested config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override path {dotted!r} crosses a scalar")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[parts[-1]] = value


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size))


def adam_step(pv, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """Descend pv.grads; returns False (and logs) on non-finite gradients.

    Moments decay even on a zero gradient; grads are zeroed afterward.
    """
    g = pv.grads
    if not np.all(np.isfinite(g)):
        log.warning("skipping optimizer step: non-finite gradient")
        pv.zero_grad()
        return False
    state.t += 1
    state.m[:] = beta1 * state.m + (1 - beta1) * g
    state.v[:] = beta2 * state.v + (1 - beta2) * g * g
    mhat = state.m / (1 - beta1**state.t)
    vhat = state.v / (1 - beta2**state.t)
    pv.values -= lr * mhat / (np.sqrt(vhat) + eps)
    pv.zero_grad()
    return True


# ---------------------------------------------------------------------------
# metrics

METRIC_FIELDS = ("update", "train_error", "f_hat", "l_m_hat", "ess",
                 "grad_variance", "scale_entropy", "exact_ell", "tau",
                 "skipped", "wall_clock")


def metrics_line(row: dict) -> str:
    ordered = {k: row.get(k) for k in METRIC_FIELDS}
    return json.dumps(ordered, sort_keys=False)


# ---------------------------------------------------------------------------
# trainer

def _normalize_rows(logw: np.ndarray) -> np.ndarray:
    finite = logw.max(axis=1, keepdims=True)
    z = np.exp(logw - finite)
    return z / z.sum(axis=1, keepdims=True)


def _row_bounds(logw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-example F-hat, L_M-hat, and ESS from (batch, M) log weights."""
    m = logw.shape[1]
    clipped = np.maximum(logw, est.LOG_ZERO_SENTINEL)
    f_hat = clipped.mean(axis=1)
    mx = clipped.max(axis=1, keepdims=True)
    l_m = (np.log(np.exp(clipped - mx).sum(axis=1)) + mx[:, 0]) - math.log(m)
    w = _normalize_rows(clipped)
    ess = 1.0 / (w**2).sum(axis=1)
    return f_hat, l_m, ess


class Trainer:
    """Owns the networks, optimizer state, and the metrics/checkpoint files."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        t = cfg.train
        self.run_id = cfg.run_id or f"{t.estimator}-s{t.seed}"
        self.use_q = est.needs_inference_net(t.estimator)
        self.fam = est.family(t.estimator)
        self.update = 0
        self.skipped_total = 0
        self.skip_window = collections.deque(maxlen=SKIP_WINDOW)
        self.baseline = est.MovingAverageBaseline()
        self._last_row: dict | None = None

        if cfg.mode == "toy":
            self._init_toy()
        else:
            self._init_image()
        self.adam_theta = AdamState.zeros(self.theta_pv.size)
        self.adam_eta = (AdamState.zeros(self.eta_pv.size)
                         if self.eta_pv is not None else None)

    # -- construction -------------------------------------------------------
    def _init_image(self) -> None:
        cfg = self.cfg
        self.mcfg = md.ModelConfig(
            glimpses=cfg.model.glimpses, num_classes=cfg.data.num_classes,
            num_scales=len(cfg.data.scales), retina=cfg.data.retina,
            lowres_side=cfg.data.lowres_side, w1=cfg.model.w1, w2=cfg.model.w2,
            wq=cfg.model.wq, embed_dim=cfg.model.embed_dim,
            loc_log_std=cfg.model.loc_log_std)
        self.pnet = md.PredictionNetwork(self.mcfg, substream(cfg.train.seed, "init", 0))
        self.qnet = (md.InferenceNetwork(self.mcfg, substream(cfg.train.seed, "init", 1))
                     if self.use_q else None)
        self.engine = BatchedEngine(self.pnet, cfg.data.scales, self.qnet)
        self.theta_pv = self.pnet.pv
        self.eta_pv = self.qnet.pv if self.qnet is not None else None
        self._train_images = self._train_labels = None

    def _init_toy(self) -> None:
        cfg = self.cfg
        wrng = substream(cfg.toy.world_seed, "toy-world")
        tables = wrng.dirichlet(np.ones(cfg.toy.num_classes), size=cfg.toy.num_cells)
        self.world = make_toy_world(cfg.toy.num_cells, cfg.toy.num_scales, tables,
                                    num_glimpses=cfg.toy.num_glimpses)
        irng = substream(cfg.train.seed, "init", 0)
        self.theta = TabularAttentionModel.random(self.world, irng, scale=0.1)
        self.proposal = (SequenceProposal.uniform(self.world) if self.use_q else None)
        self.theta_pv = self.theta.pv
        self.eta_pv = self.proposal.pv if self.proposal is not None else None

    def _load_train_data(self) -> None:
        if self._train_images is not None:
            return
        path = self.cfg.data.train_set
        if not path:
            raise ConfigurationError("image mode needs data.train_set")
        images, labels, classes = read_dataset(path)
        canvas = images.shape[1]
        if canvas != self.cfg.data.canvas or classes != self.cfg.data.num_classes:
            raise InputFormatError(
                f"dataset {path} is {canvas}x{canvas}/{classes} classes, "
                f"config wants {self.cfg.data.canvas}/{self.cfg.data.num_classes}")
        self._train_images = images
        self._train_labels = labels

    # -- schedule -----------------------------------------------------------
    def temperature(self, update: int) -> float:
        t = self.cfg.train
        anneal = int(round(t.updates * t.tau_anneal_frac))
        if anneal <= 0 or update >= anneal or t.tau == 1.0:
            return 1.0
        frac = update / anneal
        return t.tau + (1.0 - t.tau) * frac

    # -- single update ------------------------------------------------------
    def train_step(self) -> dict:
        row = (self._toy_step() if self.cfg.mode == "toy" else self._image_step())
        self.update += 1
        self._last_row = row
        frac_needed = int(SKIP_WINDOW * SKIP_ABORT_FRACTION)
        if len(self.skip_window) == SKIP_WINDOW and sum(self.skip_window) > frac_needed:
            raise DegenerateTrainingError(
                f"{sum(self.skip_window)} of the last {SKIP_WINDOW} updates were "
                f"skipped for degenerate weights")
        return row

    def _image_step(self) -> dict:
        cfg, t = self.cfg, self.cfg.train
        self._load_train_data()
        m = t.samples
        tau = self.temperature(self.update)
        rng = substream(t.seed, "rollout", self.update)
        idx = rng.integers(len(self._train_images), size=t.batch)
        images = self._train_images[idx]
        labels = self._train_labels[idx]
        img_idx = np.repeat(np.arange(t.batch), m)
        lab_r = np.repeat(labels, m)

        skipped = False
        rolls = self.engine.rollout(images, img_idx, lab_r, rng, tau=tau,
                                    use_q=self.use_q)
        logw = rolls.log_weight().reshape(t.batch, m)
        if self.fam != "var" and np.any(np.all(np.isinf(logw) & (logw < 0), axis=1)):
            rng2 = substream(t.seed, "resample", self.update)
            rolls = self.engine.rollout(images, img_idx, lab_r, rng2, tau=tau,
                                        use_q=self.use_q)
            logw = rolls.log_weight().reshape(t.batch, m)
            if np.any(np.all(np.isinf(logw) & (logw < 0), axis=1)):
                skipped = True

        if not skipped:
            self._apply_gradients(rolls, logw, labels)
        self.skip_window.append(1 if skipped else 0)
        self.skipped_total += int(skipped)

        avg_probs = rolls.class_probs.reshape(t.batch, m, -1).mean(axis=1)
        err = float(np.mean(np.argmax(avg_probs, axis=1) != labels))
        f_hat, l_m, ess = _row_bounds(logw)
        return {
            "update": self.update + 1,
            "train_error": err,
            "f_hat": float(f_hat.mean()),
            "l_m_hat": float(l_m.mean()),
            "ess": float(ess.mean()),
            "grad_variance": None,
            "scale_entropy": float(rolls.scale_entropies.mean()),
            "exact_ell": None,
            "tau": tau,
            "skipped": self.skipped_total,
            "wall_clock": time.time(),
        }

    def _apply_gradients(self, rolls, logw: np.ndarray, labels: np.ndarray) -> None:
        t = self.cfg.train
        batch, m = logw.shape
        r_count = batch * m
        cv = est.uses_control_variates(t.estimator)

        if self.fam == "var":
            batch_mean = float(rolls.log_likelihood.mean())
            b = self.baseline.peek(batch_mean) if cv else 0.0
            adv = rolls.log_likelihood - b
            c_lik = np.full(r_count, 1.0 / r_count)
            c_prior = adv / r_count
            if cv:
                self.baseline.update_mean(batch_mean)
        else:
            w_hat = _normalize_rows(logw).ravel()
            if self.fam == "wsram":
                if cv:
                    v_hat = _normalize_rows(
                        (rolls.log_prior - rolls.log_proposal).reshape(batch, m)).ravel()
                else:
                    v_hat = 0.0
                c_lik = w_hat / batch
                c_prior = (w_hat - v_hat) / batch
            else:  # wake-q family: no prediction-network update
                c_lik = c_prior = None

        loc_seeds = None
        if t.lambda_cov > 0:
            mean_loc = rolls.loc_means.mean(axis=1, keepdims=True)  # (T, 1, 2)
            loc_seeds = np.broadcast_to(-2.0 * t.lambda_cov * mean_loc / r_count,
                                        rolls.loc_means.shape)
        ent_coef = t.lambda_ent / r_count if t.lambda_ent > 0 else 0.0

        if c_prior is not None or ent_coef or loc_seeds is not None:
            cl = c_lik if c_lik is not None else np.zeros(r_count)
            cp = c_prior if c_prior is not None else np.zeros(r_count)
            self.engine.backward_theta(rolls, cl, cp, entropy_coef=ent_coef,
                                       loc_seeds=loc_seeds)
            self.theta_pv.grads *= -1.0  # ascent objective -> Adam descent
            adam_step(self.theta_pv, self.adam_theta, t.lr, t.beta1, t.beta2, t.eps)

        if self.use_q and self.fam in ("wsram", "wakeq"):
            w_hat = _normalize_rows(logw).ravel()
            base = 1.0 / m if cv else 0.0
            # mutation hook must act on the batched path too
            scale = 0.5 if os.environ.get("SACCADE_MUTATE_WAKEQ_CV") and cv else 1.0
            self.engine.backward_eta(rolls, scale * (w_hat - base) / batch)
            self.eta_pv.grads *= -1.0
            adam_step(self.eta_pv, self.adam_eta, t.lr, t.beta1, t.beta2, t.eps)

    def _toy_step(self) -> dict:
        t = self.cfg.train
        m = t.samples
        rng = substream(t.seed, "rollout", self.update)
        err_count = 0
        ess_vals, f_vals, lm_vals = [], [], []
        skipped = False

        self.theta_pv.zero_grad()
        if self.eta_pv is not None:
            self.eta_pv.zero_grad()
        for _ in range(t.batch):
            y = int(rng.integers(self.world.num_classes))
            if self.use_q:
                trajs = [rollout_toy_proposal(self.theta, self.proposal, y, rng)
                         for _ in range(m)]
            else:
                trajs = [rollout_toy_prior(self.theta, y, rng) for _ in range(m)]
            err_count += int(np.argmax(trajs[0].class_probs) != y)
            logw = np.array([tr.log_weight() for tr in trajs])
            weights = est.ImportanceWeightSet(logw, _normalize_rows(logw[None])[0])
            bounds = est.bound_estimates(weights)
            f_vals.append(bounds["F_hat"])
            lm_vals.append(bounds["L_M_hat"])
            ess_vals.append(est.ess(weights))

            if self.fam == "var":
                if est.uses_control_variates(t.estimator):
                    est.variational_gradient_cv(trajs, self.theta, baseline=self.baseline)
                else:
                    est.variational_gradient(trajs, self.theta)
            elif self.fam == "wsram":
                if est.uses_control_variates(t.estimator):
                    est.wsram_theta_gradient_cv(trajs, weights, self.theta)
                else:
                    est.wsram_theta_gradient(trajs, weights, self.theta)
            if self.use_q:
                if est.uses_control_variates(t.estimator):
                    est.wake_q_gradient_cv(trajs, weights, self.proposal)
                else:
                    est.wake_q_gradient(trajs, weights, self.proposal)

        if self.fam != "wakeq":
            self.theta_pv.grads *= -1.0 / t.batch
            adam_step(self.theta_pv, self.adam_theta, t.lr, t.beta1, t.beta2, t.eps)
        else:
            self.theta_pv.zero_grad()
        if self.use_q:
            self.eta_pv.grads *= -1.0 / t.batch
            adam_step(self.eta_pv, self.adam_eta, t.lr, t.beta1, t.beta2, t.eps)

        self.skip_window.append(1 if skipped else 0)
        force = tabular_forcer(self.theta)
        ell = float(np.mean([exact_marginal(self.world, force, y)
                             for y in range(self.world.num_classes)]))
        return {
            "update": self.update + 1,
            "train_error": err_count / t.batch,
            "f_hat": float(np.mean(f_vals)),
            "l_m_hat": float(np.mean(lm_vals)),
            "ess": float(np.mean(ess_vals)),
            "grad_variance": None,
            "scale_entropy": None,
            "exact_ell": ell,
            "tau": 1.0,
            "skipped": self.skipped_total,
            "wall_clock": time.time(),
        }

    # -- full run -----------------------------------------------------------
    def metrics_path(self) -> str:
        return os.path.join(self.out_dir, f"metrics-{self.run_id}.jsonl")

    def checkpoint_path(self) -> str:
        return os.path.join(self.out_dir, f"checkpoint-{self.run_id}.npz")

    def run(self) -> None:
        t = self.cfg.train
        mode = "a" if self.update > 0 else "w"
        with open(self.metrics_path(), mode) as fh:
            if self.update == 0:
                fh.write(metrics_line(self._initial_row()) + "\n")
                fh.flush()
            while self.update < t.updates:
                row = self.train_step()
                if (self.update % t.metrics_every == 0
                        or self.update == t.updates):
                    fh.write(metrics_line(row) + "\n")
                    fh.flush()
                if t.checkpoint_every and self.update % t.checkpoint_every == 0:
                    self.save_checkpoint()
        self.save_checkpoint()

    def _initial_row(self) -> dict:
        """Metrics at update 0 from a probe batch; no parameters change."""
        theta_before = self.theta_pv.values.copy()
        saved = (self.update, self.adam_theta,
                 None if self.adam_eta is None else self.adam_eta)
        self.adam_theta = AdamState.zeros(self.theta_pv.size)
        if self.eta_pv is not None:
            eta_before = self.eta_pv.values.copy()
            self.adam_eta = AdamState.zeros(self.eta_pv.size)
        lr = self.cfg.train.lr
        self.cfg.train.lr = 0.0
        baseline_state = (self.baseline._value, self.baseline._initialized)
        try:
            row = (self._toy_step() if self.cfg.mode == "toy" else self._image_step())
        finally:
            self.cfg.train.lr = lr
            self.update, self.adam_theta, adam_eta = saved
            if adam_eta is not None:
                self.adam_eta = adam_eta
            self.theta_pv.values[:] = theta_before
            if self.eta_pv is not None:
                self.eta_pv.values[:] = eta_before
            self.baseline._value, self.baseline._initialized = baseline_state
            if self.skip_window:
                self.skip_window.pop()
        row["update"] = 0
        return row

    # -- checkpoints --------------------------------------------------------
    def save_checkpoint(self, path: str | None = None) -> str:
        path = path or self.checkpoint_path()
        payload = {
            "version": np.int64(CHECKPOINT_VERSION),
            "update": np.int64(self.update),
            "skipped_total": np.int64(self.skipped_total),
            "skip_window": np.array(self.skip_window, dtype=np.int64),
            "theta": self.theta_pv.values,
            "adam_theta_m": self.adam_theta.m,
            "adam_theta_v": self.adam_theta.v,
            "adam_theta_t": np.int64(self.adam_theta.t),
            "baseline": np.array([self.baseline._value,
                                  float(self.baseline._initialized)]),
            "config_json": np.array(json.dumps(config_to_dict(self.cfg))),
        }
        if self.eta_pv is not None:
            payload.update({
                "eta": self.eta_pv.values,
                "adam_eta_m": self.adam_eta.m,
                "adam_eta_v": self.adam_eta.v,
                "adam_eta_t": np.int64(self.adam_eta.t),
            })
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
        return path

    def load_checkpoint(self, path: str) -> None:
        try:
            data = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise InputFormatError(f"cannot read checkpoint {path}: {exc}") from exc
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise InputFormatError(
                f"checkpoint {path} has version {int(data['version'])}, "
                f"expected {CHECKPOINT_VERSION}")
        if data["theta"].shape != self.theta_pv.values.shape:
            raise ConfigurationError(
                f"checkpoint {path} holds {data['theta'].shape[0]} prediction "
                f"parameters, model has {self.theta_pv.size}")
        self.update = int(data["update"])
        self.skipped_total = int(data["skipped_total"])
        self.skip_window = collections.deque(
            data["skip_window"].tolist(), maxlen=SKIP_WINDOW)
        self.theta_pv.values[:] = data["theta"]
        self.adam_theta = AdamState(m=data["adam_theta_m"].copy(),
                                    v=data["adam_theta_v"].copy(),
                                    t=int(data["adam_theta_t"]))
        self.baseline._value = float(data["baseline"][0])
        self.baseline._initialized = bool(data["baseline"][1])
        if self.eta_pv is not None:
            if "eta" not in data:
                raise ConfigurationError(
                    f"checkpoint {path} lacks inference-network parameters")
            if data["eta"].shape != self.eta_pv.values.shape:
                raise ConfigurationError(f"checkpoint {path} inference shape mismatch")
            self.eta_pv.values[:] = data["eta"]
            self.adam_eta = AdamState(m=data["adam_eta_m"].copy(),
                                      v=data["adam_eta_v"].copy(),
                                      t=int(data["adam_eta_t"]))


# ---------------------------------------------------------------------------
# evaluation

def evaluate(images: np.ndarray, labels: np.ndarray, pnet: md.PredictionNetwork,
             scales, rollouts: int, rng: np.random.Generator,
             chunk: int = 64) -> float:
    """Error rate with rollouts-per-example averaged class probabilities."""
    if rollouts < 1:
        raise ConfigurationError("need at least one evaluation rollout")
    images = np.asarray(images, dtype=np.float64)
    if images.max() > 1.0:
        images = images / 255.0
    labels = np.asarray(labels, dtype=np.int64)
    engine = BatchedEngine(pnet, scales)
    wrong = 0
    for start in range(0, len(images), chunk):
        batch = images[start:start + chunk]
        idx = np.repeat(np.arange(len(batch)), rollouts)
        rolls = engine.rollout(batch, idx, None, rng)
        probs = rolls.class_probs.reshape(len(batch), rollouts, -1).mean(axis=1)
        wrong += int(np.sum(np.argmax(probs, axis=1) != labels[start:start + chunk]))
    return wrong / len(images)
