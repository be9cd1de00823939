"""Independent reference computations shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from mccm import net


def mann_whitney_auc(labels, scores) -> float:
    """Pairwise statistic: P(pristine score > synthetic score) with ties counted half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg)))


def brute_eer(labels, scores, n_thresholds: int = 1_000_000) -> float:
    """Dense threshold scan with the accept rule ``score >= t``.

    Rates are evaluated at ``n_thresholds`` evenly spaced thresholds spanning
    the score range. The EER is read off where ``FPR - FNR`` changes sign,
    linearly interpolated between the two scan points. Scores must be spaced
    wider than the scan step for every operating point to be visited.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    lo, hi = scores.min(), scores.max()
    pad = max(hi - lo, 1.0) * 1e-3
    thr = np.linspace(hi + pad, lo - pad, n_thresholds)
    fpr = (len(neg) - np.searchsorted(neg, thr, side="left")) / len(neg)
    fnr = 1.0 - (len(pos) - np.searchsorted(pos, thr, side="left")) / len(pos)
    d = fpr - fnr
    hit = np.flatnonzero(d == 0.0)
    if hit.size:
        return float(fpr[hit[0]])
    k = int(np.flatnonzero((d[:-1] < 0) & (d[1:] > 0))[0])
    t = -d[k] / (d[k + 1] - d[k])
    return float(fpr[k] + t * (fpr[k + 1] - fpr[k]))


def network_fd_check(cfg: net.NetConfig, batch: int = 2, step: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Relative error of ``net.backward`` against central differences, per parameter group.

    The scalar objective is a fixed random linear functional of every head
    probability, so each head's gradient path is exercised.
    """
    rng = np.random.default_rng(seed)
    state = net.init_network(cfg)
    # perturb biases off zero so their gradients are generic
    for k, v in state.params.items():
        v += 0.1 * rng.standard_normal(v.shape)
    s = cfg.input_size
    rgb = rng.random((batch, s, s, 3))
    freq = rng.uniform(-1, 1, (batch, s, s, 3))
    coef = {h: rng.standard_normal(batch) for h in cfg.heads}

    def objective() -> float:
        probs, _, _ = net.forward(state, rgb, freq)
        return float(sum((coef[h] * probs[h]).sum() for h in cfg.heads))

    _, _, cache = net.forward(state, rgb, freq)
    grads = net.backward(state, cache, coef)
    errors = {}
    for name, theta in state.params.items():
        numeric = np.zeros_like(theta)
        flat = theta.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            up = objective()
            flat[j] = old - step
            down = objective()
            flat[j] = old
            nflat[j] = (up - down) / (2 * step)
        denom = max(np.linalg.norm(numeric), np.linalg.norm(grads[name]), 1e-12)
        errors[name] = float(np.linalg.norm(grads[name] - numeric) / denom)
    return errors


FD_CONFIG = net.NetConfig(input_size=8, stem_channels=3, blocks=1, layers_per_block=2, growth=2)
