"""Cross entropy, focal loss and cross-modal focal loss with analytic gradients.

All functions broadcast over numpy arrays. Labels follow the pristine = 1
convention; ``p`` is always the predicted probability of the pristine class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    gamma: float = 3.0
    lam: float = 0.5
    clamp_eps: float = 1e-7
    # BCE baseline supervises the joint head only unless this is set
    bce_all_heads: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ValueError(f"clamp_eps must lie in (0, 0.5), got {self.clamp_eps}")


@dataclass(frozen=True)
class HeadOutputs:
    s: np.ndarray
    f: np.ndarray
    r: np.ndarray

    def clamped(self, eps: float) -> "HeadOutputs":
        return HeadOutputs(clamp(self.s, eps), clamp(self.f, eps), clamp(self.r, eps))


@dataclass(frozen=True)
class LossValue:
    total: float
    ce_r: float
    cmfl_sf: float
    cmfl_fs: float


def clamp(p, eps: float = 1e-7):
    return np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)


def _sign(y):
    # d p_t / d p
    return np.where(np.asarray(y) == 1, 1.0, -1.0)


def p_target(p, y):
    p = np.asarray(p, dtype=np.float64)
    return np.where(np.asarray(y) == 1, p, 1.0 - p)


def ce(p, y):
    return -np.log(p_target(p, y))


def bce_loss(r, y):
    return ce(r, y)


def bce_grad(r, y):
    """d/dr of ``bce_loss``."""
    return -_sign(y) / p_target(r, y)


def focal(p, y, alpha: float = 1.0, gamma: float = 3.0):
    pt = p_target(p, y)
    return -alpha * (1.0 - pt) ** gamma * np.log(pt)


def cmfl_weight(s_t, f_t):
    """Agreement weight: ``f_t`` times the harmonic mean of ``s_t`` and ``f_t``."""
    s_t = np.asarray(s_t, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    denom = s_t + f_t
    small = denom < 1e-12
    # the harmonic mean of equal values is the value itself, kept exact
    hm = np.where(s_t == f_t, s_t, 2.0 * s_t * f_t / np.where(small, 1.0, denom))
    return np.where(small, 0.0, f_t * hm)


def _cmfl_weight_grads(s_t, f_t):
    denom = s_t + f_t
    small = denom < 1e-12
    d2 = np.where(small, 1.0, denom * denom)
    dw_ds = np.where(small, 0.0, 2.0 * f_t**3 / d2)
    dw_df = np.where(small, 0.0, 2.0 * s_t * f_t * (2.0 * s_t + f_t) / d2)
    return dw_ds, dw_df


def cmfl(sp, fp, y, alpha: float = 1.0, gamma: float = 3.0):
    """Loss of the ``sp`` branch modulated by its agreement with ``fp``."""
    s_t = p_target(sp, y)
    f_t = p_target(fp, y)
    w = cmfl_weight(s_t, f_t)
    return -alpha * (1.0 - w) ** gamma * np.log(s_t)


def _cmfl_grads(s_t, f_t, alpha, gamma):
    """Partials of ``cmfl`` with respect to the target probabilities."""
    w = cmfl_weight(s_t, f_t)
    dw_ds, dw_df = _cmfl_weight_grads(s_t, f_t)
    one_w = 1.0 - w
    mod = one_w**gamma
    dmod = gamma * one_w ** (gamma - 1.0) if gamma != 0 else np.zeros_like(one_w)
    log_s = np.log(s_t)
    d_s = -alpha * (mod / s_t - dmod * dw_ds * log_s)
    d_f = alpha * dmod * dw_df * log_s
    return d_s, d_f


def per_sample_loss(h: HeadOutputs, y, cfg: LossConfig):
    """Per-sample objective and its three parts (unreduced)."""
    h = h.clamped(cfg.clamp_eps)
    ce_r = ce(h.r, y)
    sf = cmfl(h.s, h.f, y, cfg.alpha, cfg.gamma)
    fs = cmfl(h.f, h.s, y, cfg.alpha, cfg.gamma)
    total = (1.0 - cfg.lam) * ce_r + cfg.lam * (sf + fs)
    return total, ce_r, sf, fs


def total_loss(h: HeadOutputs, y, cfg: LossConfig = LossConfig()) -> LossValue:
    """Batch-mean objective ``(1-lam) CE(r) + lam (CMFL(s,f) + CMFL(f,s))``."""
    total, ce_r, sf, fs = per_sample_loss(h, y, cfg)
    return LossValue(float(np.mean(total)), float(np.mean(ce_r)), float(np.mean(sf)), float(np.mean(fs)))


def total_loss_grad(h: HeadOutputs, y, cfg: LossConfig = LossConfig()) -> HeadOutputs:
    """Per-sample partials of the per-sample objective w.r.t. ``s``, ``f``, ``r``.

    Differentiates through the agreement weight. Entries whose input sits
    outside the clamp range get a zero gradient.
    """
    eps = cfg.clamp_eps
    hc = h.clamped(eps)
    sign = _sign(y)
    s_t, f_t, r_t = p_target(hc.s, y), p_target(hc.f, y), p_target(hc.r, y)

    d_r = -(1.0 - cfg.lam) / r_t
    ds_sf, df_sf = _cmfl_grads(s_t, f_t, cfg.alpha, cfg.gamma)
    df_fs, ds_fs = _cmfl_grads(f_t, s_t, cfg.alpha, cfg.gamma)
    d_s = cfg.lam * (ds_sf + ds_fs)
    d_f = cfg.lam * (df_sf + df_fs)

    def inside(p):
        p = np.asarray(p, dtype=np.float64)
        return (p >= eps) & (p <= 1.0 - eps)

    return HeadOutputs(
        np.where(inside(h.s), sign * d_s, 0.0),
        np.where(inside(h.f), sign * d_f, 0.0),
        np.where(inside(h.r), sign * d_r, 0.0),
    )
