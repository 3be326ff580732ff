"""Subject-fidelity feedback learning.

A truncated sampling rollout runs gradient-free from pure noise down to a
small step index t', then a single differentiable velocity evaluation gives
the one-step clean-image prediction x0 = z_t - t * v. A frozen extension
detector scores that prediction; -log sigmoid(1 - S) is added to the denoise
loss with a small weight, and rollouts whose score is already below a
threshold are skipped (zero gradient).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import detector as det
from . import model as gm
from .autodiff import Tensor
from .rng import RngStream


@dataclass
class FeedbackConfig:
    t1: int = 10  # reward step drawn uniformly from {1..t1}
    lam: float = 0.0005
    skip_threshold: float = 0.3
    steps: int = 28  # T', sampler steps

    def __post_init__(self):
        if not (1 <= self.t1 <= self.steps):
            raise ValueError(f"t1 must lie in [1, {self.steps}]")
        if self.lam < 0:
            raise ValueError("reward weight must be non-negative")


def refl_rollout(store, cfg: gm.ModelConfig, bundle, fb: FeedbackConfig,
                 rng: RngStream, velocity_fn=None):
    """One-step x0 prediction after a truncated gradient-free rollout.

    Draws t' ~ U{1..t1}, integrates T'-t' Euler steps without gradients
    (conditional velocity only), then evaluates the velocity once more
    differentiably and returns x0 = z_t - t * v clamped to [-1, 1], along
    with t'. `velocity_fn(z, t)` overrides the model for oracle tests.
    """
    T = fb.steps
    b = bundle.prompt_ids.shape[0]
    t_prime = 1 + int(rng.integers(0, fb.t1))
    z = rng.normal((b, cfg.channels, cfg.image_size, cfg.image_size))
    with ad.no_grad():
        for i in range(T, t_prime, -1):
            t = np.full(b, i / T, dtype=np.float32)
            if velocity_fn is not None:
                v = velocity_fn(z, t)
            else:
                v = gm.model_velocity(store, cfg, Tensor(z), t, bundle).data
            if not np.all(np.isfinite(v)):
                raise ad.NonFiniteError("non-finite state in rollout")
            z = z - v / T
    t = np.full(b, t_prime / T, dtype=np.float32)
    if velocity_fn is not None:
        v = ad.as_tensor(velocity_fn(z, t))
    else:
        v = gm.model_velocity(store, cfg, Tensor(z), t, bundle)
    x0 = ad.sub(Tensor(z), ad.affine(v, t_prime / T))
    return ad.clamp(x0, -1.0, 1.0), t_prime


def reward_loss(x0_t, mask, det_store, fb: FeedbackConfig):
    """-log sigmoid(1 - S) through the frozen detector; 0 below the skip threshold.

    `x0_t` is a single predicted image (3, H, W) Tensor; `mask` the intended
    subject mask. Returns (loss Tensor or None when skipped, S as float).
    """
    s_val = det.score(det_store, x0_t.data, mask)
    if not np.isfinite(s_val):
        raise ad.NonFiniteError("detector produced a non-finite score")
    if s_val < fb.skip_threshold:
        return None, s_val
    s = det.score_tensor(det_store, x0_t, mask)
    # -log sigmoid(1 - S) == softplus(S - 1)
    loss = ad.softplus(ad.affine(s, 1.0, -1.0))
    return ad.reshape(loss, ()), s_val


def total_loss(l_denoise, l_reward, lam):
    """L_total = L_denoise + lambda * L_reward (reward may be None: skipped)."""
    if l_reward is None or lam == 0.0:
        return l_denoise
    return ad.add(l_denoise, ad.affine(l_reward, lam))
