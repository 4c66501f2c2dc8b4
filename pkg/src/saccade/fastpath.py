"""Vectorized rollout engine for image training at scale.

Runs R rollouts in lockstep with batched matrix products and a
hand-written backward pass through time, reusing the exact parameter
layout of the per-trajectory networks so the two engines are
interchangeable (and equivalence-tested against each other). Only the
continuous location mode over image canvases is supported here; toy
worlds stay on the per-trajectory engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .model import InferenceNetwork, ModelConfig, PredictionNetwork

LOG_2PI = math.log(2.0 * math.pi)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _entropy_seed_rows(logits: np.ndarray) -> np.ndarray:
    lp = _log_softmax_rows(logits)
    p = np.exp(lp)
    h = -(p * lp).sum(axis=1, keepdims=True)
    return -p * (lp + h)


def _rows(arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return arr[np.arange(len(idx)), idx]


def _onehot_rows(idx: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(idx), k))
    out[np.arange(len(idx)), idx] = 1.0
    return out


@dataclass
class BatchedRollouts:
    """Forward results plus the activation caches the backward pass needs."""

    locations: np.ndarray          # (T, R, 2)
    scale_indices: np.ndarray      # (T, R) int
    step_log_prior: np.ndarray     # (T, R)
    step_log_proposal: np.ndarray  # (T, R)
    log_likelihood: np.ndarray     # (R,) — zeros when labels is None
    class_probs: np.ndarray        # (R, C)
    scale_entropies: np.ndarray    # (T, R)
    loc_means: np.ndarray          # (T, R, 2)
    labels: np.ndarray | None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def log_prior(self) -> np.ndarray:
        return self.step_log_prior.sum(axis=0)

    @property
    def log_proposal(self) -> np.ndarray:
        return self.step_log_proposal.sum(axis=0)

    def log_weight(self) -> np.ndarray:
        return self.log_prior + self.log_likelihood - self.log_proposal


class BatchedEngine:
    """Shared-parameter batched counterpart of the per-trajectory rollouts."""

    def __init__(self, pnet: PredictionNetwork, scales,
                 qnet: InferenceNetwork | None = None):
        if pnet.cfg.loc_mode != "continuous":
            raise ConfigurationError("batched engine supports continuous locations only")
        if pnet.cfg.toy_obs_dim:
            raise ConfigurationError("batched engine works on image canvases only")
        self.pnet = pnet
        self.qnet = qnet
        self.cfg: ModelConfig = pnet.cfg
        self.scales = np.asarray(scales, dtype=np.float64)
        if len(self.scales) != self.cfg.num_scales:
            raise ConfigurationError("scale table size must match the model config")

    # -- parameter access helpers ------------------------------------------
    def _w(self, name: str) -> np.ndarray:
        return self.pnet.pv[name].value

    def _qw(self, name: str) -> np.ndarray:
        return self.qnet.pv[name].value

    # -- forward ------------------------------------------------------------
    def rollout(self, images: np.ndarray, img_idx: np.ndarray, labels=None,
                rng: np.random.Generator | None = None, tau: float = 1.0,
                use_q: bool = False, forced: tuple | None = None) -> BatchedRollouts:
        """Run R rollouts; rollout r reads ``images[img_idx[r]]``.

        ``forced`` replays fixed actions as ``(locations, scale_indices)``
        with shapes (T, R, 2) and (T, R). With ``use_q`` the inference
        network drives the sampling (labels required).
        """
        cfg = self.cfg
        if use_q and self.qnet is None:
            raise ConfigurationError("use_q requires an inference network")
        if use_q and labels is None:
            raise ConfigurationError("proposal sampling requires labels")
        if tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {tau}")
        images = np.ascontiguousarray(images, dtype=np.float64)
        img_idx = np.asarray(img_idx, dtype=np.int64)
        r_count = len(img_idx)
        t_count = cfg.glimpses
        h_img, w_img = images.shape[1:]
        labels = None if labels is None else np.asarray(labels, dtype=np.int64)

        c = {"x_obs": [], "h1_prev": [], "h2_prev": [], "mask1": [], "mask2": [],
             "p_loc": [], "p_scale": []}
        run_q = self.qnet is not None and (use_q or forced is not None)
        if run_q:
            c.update({"xq": [], "hq_prev": [], "maskq": [], "hq": [],
                      "q_loc": [], "q_scale": []})

        # context view initializes the top layer only
        x0 = np.stack([kernels.resample_window(images[i], 0.0, 0.0, float(h_img),
                                               cfg.lowres_side).ravel()
                       for i in range(len(images))])[img_idx]
        z0 = x0 @ self._w("lowres.W").T + self._w("lowres.b")
        mask0 = (z0 > 0).astype(np.float64)
        h2 = np.maximum(z0, 0.0)
        h1 = np.zeros((r_count, cfg.w1))
        hq = np.zeros((r_count, cfg.wq)) if run_q else None

        locations = np.zeros((t_count, r_count, 2))
        scale_indices = np.zeros((t_count, r_count), dtype=np.int64)
        step_lp = np.zeros((t_count, r_count))
        step_lq = np.zeros((t_count, r_count))
        scale_entropies = np.zeros((t_count, r_count))
        loc_means = np.zeros((t_count, r_count, 2))
        sig_p = np.exp(self.pnet.loc_log_std)

        for n in range(t_count):
            p_loc = h2 @ self._w("loc.W").T + self._w("loc.b")
            p_scale = h2 @ self._w("scale.W").T + self._w("scale.b")
            if run_q:
                emb = self._qw("embed")[labels]
                xq = np.concatenate([emb, h2], axis=1)
                zq = xq @ self._qw("q.Wx").T + hq @ self._qw("q.Wh").T + self._qw("q.b")
                maskq = (zq > 0).astype(np.float64)
                hq_new = np.maximum(zq, 0.0)
                q_loc = hq_new @ self._qw("qloc.W").T + self._qw("qloc.b")
                q_scale = hq_new @ self._qw("qscale.W").T + self._qw("qscale.b")

            if use_q:
                samp_mean, samp_logits = q_loc, q_scale
                samp_sig = np.exp(self.qnet.loc_log_std)
            else:
                samp_mean, samp_logits = p_loc, p_scale
                samp_sig = sig_p
            samp_sig_t = samp_sig * tau

            if forced is not None:
                loc = np.asarray(forced[0][n], dtype=np.float64)
                sc = np.asarray(forced[1][n], dtype=np.int64)
            else:
                loc = samp_mean + samp_sig_t * rng.standard_normal((r_count, 2))
                cdf = np.cumsum(_softmax_rows(samp_logits / tau), axis=1)
                sc = (rng.random((r_count, 1)) > cdf).sum(axis=1)
                sc = np.minimum(sc, cfg.num_scales - 1)
            locations[n], scale_indices[n] = loc, sc

            # log-probs: prior under the policy heads, proposal = sampling density
            z_loc_p = (loc - p_loc) / sig_p
            step_lp[n] = (-0.5 * (z_loc_p**2).sum(axis=1)
                          - self.pnet.loc_log_std.sum() - LOG_2PI
                          + _rows(_log_softmax_rows(p_scale), sc))
            z_loc_s = (loc - samp_mean) / samp_sig_t
            step_lq[n] = (-0.5 * (z_loc_s**2).sum(axis=1)
                          - np.log(samp_sig_t).sum() - LOG_2PI
                          + _rows(_log_softmax_rows(samp_logits / tau), sc))

            lsp = _log_softmax_rows(p_scale)
            scale_entropies[n] = -(np.exp(lsp) * lsp).sum(axis=1)
            loc_means[n] = p_loc

            # observe: batched glimpse extraction grouped by scale
            win = self.scales[sc]
            row = (np.clip(loc[:, 1], -1, 1) + 1) / 2 * h_img
            col = (np.clip(loc[:, 0], -1, 1) + 1) / 2 * w_img
            patch = kernels.extract_batch(images, img_idx, row - win / 2,
                                          col - win / 2, win, cfg.retina)
            parts = [patch.reshape(r_count, -1)]
            if cfg.feed_action:
                parts += [np.clip(loc, -1.0, 1.0), _onehot_rows(sc, cfg.num_scales)]
            x_obs = np.concatenate(parts, axis=1)

            c["x_obs"].append(x_obs)
            c["h1_prev"].append(h1)
            c["h2_prev"].append(h2)
            c["p_loc"].append(p_loc)
            c["p_scale"].append(p_scale)
            if run_q:
                c["xq"].append(xq)
                c["hq_prev"].append(hq)
                c["maskq"].append(maskq)
                c["hq"].append(hq_new)
                c["q_loc"].append(q_loc)
                c["q_scale"].append(q_scale)
                hq = hq_new

            z1 = x_obs @ self._w("l1.Wx").T + h1 @ self._w("l1.Wh").T + self._w("l1.b")
            c["mask1"].append((z1 > 0).astype(np.float64))
            h1 = np.maximum(z1, 0.0)
            z2 = h1 @ self._w("l2.Wx").T + h2 @ self._w("l2.Wh").T + self._w("l2.b")
            c["mask2"].append((z2 > 0).astype(np.float64))
            h2 = np.maximum(z2, 0.0)

        cls_logits = h1 @ self._w("cls.W").T + self._w("cls.b")
        class_probs = _softmax_rows(cls_logits)
        if labels is not None:
            loglik = _rows(_log_softmax_rows(cls_logits), labels)
        else:
            loglik = np.zeros(r_count)

        c.update({"x0": x0, "mask0": mask0, "h1_final": h1, "class_probs": class_probs})
        return BatchedRollouts(
            locations=locations, scale_indices=scale_indices,
            step_log_prior=step_lp, step_log_proposal=step_lq,
            log_likelihood=loglik, class_probs=class_probs,
            scale_entropies=scale_entropies, loc_means=loc_means,
            labels=labels, _cache=c)

    # -- backward -----------------------------------------------------------
    def backward_theta(self, rolls: BatchedRollouts, coef_lik: np.ndarray,
                       coef_prior: np.ndarray, entropy_coef: float = 0.0,
                       loc_seeds: np.ndarray | None = None) -> None:
        """Accumulate per-rollout-weighted policy/classifier gradients.

        Matches the per-trajectory semantics: ``coef_lik`` scales the label
        log-likelihood score, ``coef_prior`` every action log-prob score,
        ``entropy_coef`` the scale-head entropy bonus, and ``loc_seeds``
        (T, R, 2) seeds the location means directly.
        """
        cfg, c = self.cfg, rolls._cache
        pv = self.pnet.pv
        r_count = rolls.class_probs.shape[0]
        coef_lik = np.asarray(coef_lik, dtype=np.float64).reshape(r_count, 1)
        coef_prior = np.asarray(coef_prior, dtype=np.float64).reshape(r_count, 1)
        sig_p = np.exp(self.pnet.loc_log_std)

        g_cls = coef_lik * (_onehot_rows(rolls.labels, cfg.num_classes)
                            - c["class_probs"]) if rolls.labels is not None else 0.0
        if rolls.labels is not None:
            pv["cls.W"].add_grad(g_cls.T @ c["h1_final"])
            pv["cls.b"].add_grad(g_cls.sum(axis=0))
            g_h1 = g_cls @ self._w("cls.W")
        else:
            g_h1 = np.zeros((r_count, cfg.w1))
        g_h2 = np.zeros((r_count, cfg.w2))

        for n in reversed(range(cfg.glimpses)):
            h1_n = c["h1_prev"][n + 1] if n + 1 < cfg.glimpses else c["h1_final"]
            gz2 = g_h2 * c["mask2"][n]
            pv["l2.Wh"].add_grad(gz2.T @ c["h2_prev"][n])
            pv["l2.Wx"].add_grad(gz2.T @ h1_n)
            pv["l2.b"].add_grad(gz2.sum(axis=0))
            g_h1 = g_h1 + gz2 @ self._w("l2.Wx")
            g_h2 = gz2 @ self._w("l2.Wh")

            gz1 = g_h1 * c["mask1"][n]
            pv["l1.Wh"].add_grad(gz1.T @ c["h1_prev"][n])
            pv["l1.Wx"].add_grad(gz1.T @ c["x_obs"][n])
            pv["l1.b"].add_grad(gz1.sum(axis=0))
            g_h1 = gz1 @ self._w("l1.Wh")

            g_loc = coef_prior * (rolls.locations[n] - c["p_loc"][n]) / sig_p**2
            if loc_seeds is not None:
                g_loc = g_loc + loc_seeds[n]
            g_scale = coef_prior * (_onehot_rows(rolls.scale_indices[n], cfg.num_scales)
                                    - _softmax_rows(c["p_scale"][n]))
            if entropy_coef != 0.0:
                g_scale = g_scale + entropy_coef * _entropy_seed_rows(c["p_scale"][n])
            pv["loc.W"].add_grad(g_loc.T @ c["h2_prev"][n])
            pv["loc.b"].add_grad(g_loc.sum(axis=0))
            pv["scale.W"].add_grad(g_scale.T @ c["h2_prev"][n])
            pv["scale.b"].add_grad(g_scale.sum(axis=0))
            g_h2 = g_h2 + g_loc @ self._w("loc.W") + g_scale @ self._w("scale.W")

        gz0 = g_h2 * c["mask0"]
        pv["lowres.W"].add_grad(gz0.T @ c["x0"])
        pv["lowres.b"].add_grad(gz0.sum(axis=0))

    def backward_eta(self, rolls: BatchedRollouts, coef: np.ndarray) -> None:
        """Accumulate per-rollout-weighted proposal score gradients."""
        if self.qnet is None or "hq" not in rolls._cache:
            raise ConfigurationError("rollouts carry no inference-network pass")
        cfg, c = self.cfg, rolls._cache
        pv = self.qnet.pv
        r_count = rolls.class_probs.shape[0]
        coef = np.asarray(coef, dtype=np.float64).reshape(r_count, 1)
        sig_q = np.exp(self.qnet.loc_log_std)
        g_embed = np.zeros(pv["embed"].shape)
        g_hq = np.zeros((r_count, cfg.wq))

        for n in reversed(range(cfg.glimpses)):
            g_loc = coef * (rolls.locations[n] - c["q_loc"][n]) / sig_q**2
            g_scale = coef * (_onehot_rows(rolls.scale_indices[n], cfg.num_scales)
                              - _softmax_rows(c["q_scale"][n]))
            pv["qloc.W"].add_grad(g_loc.T @ c["hq"][n])
            pv["qloc.b"].add_grad(g_loc.sum(axis=0))
            pv["qscale.W"].add_grad(g_scale.T @ c["hq"][n])
            pv["qscale.b"].add_grad(g_scale.sum(axis=0))
            g_hq = g_hq + g_loc @ self._qw("qloc.W") + g_scale @ self._qw("qscale.W")

            gzq = g_hq * c["maskq"][n]
            pv["q.Wh"].add_grad(gzq.T @ c["hq_prev"][n])
            pv["q.Wx"].add_grad(gzq.T @ c["xq"][n])
            pv["q.b"].add_grad(gzq.sum(axis=0))
            g_hq = gzq @ self._qw("q.Wh")
            g_xq = gzq @ self._qw("q.Wx")
            np.add.at(g_embed, rolls.labels, g_xq[:, :cfg.embed_dim])

        pv["embed"].add_grad(g_embed)
