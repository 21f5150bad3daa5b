"""Heteroscedastic (data-uncertainty) classification loss with analytic gradients.

Per pixel ``i`` the logits are corrupted ``T`` times with Gaussian noise of
scale ``sigma_i`` and the loss is the negative log of the averaged softmax
probability of the correct class::

    L_i = -log( 1/T * sum_t softmax(s_i + sigma_i * eps_t)[c_i] )

The noise draws are derived per pixel from ``(seed, pixel index)``, so equal
seeds give identical draws no matter how pixels are batched, and value and
gradient are computed from the same draws.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp


def noise_samples(seed: int, n_pixels: int, samples: int, classes: int) -> np.ndarray:
    """Standard-normal draws of shape ``(n_pixels, samples, classes)``."""
    out = np.empty((n_pixels, samples, classes))
    for i in range(n_pixels):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        out[i] = rng.standard_normal((samples, classes))
    return out


def heteroscedastic_ce_loss(logits, sigma, target, samples: int = 1, seed: int = 0,
                            reduction: str = "sum", eps=None):
    """Loss and gradients for a batch of pixels.

    Args:
        logits: ``(N, C)`` class logits.
        sigma: ``(N,)`` non-negative noise scales (a scalar is broadcast).
        target: ``(N,)`` 0-based index of the correct class.
        samples: number of noise draws T.
        seed: generator seed for the draws.
        reduction: ``"sum"`` over pixels or ``"mean"``.
        eps: optional pre-drawn noise ``(N, T, C)`` overriding ``seed``.

    Returns:
        ``(loss, grad_logits, grad_sigma)``.
    """
    s = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, c = s.shape
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    tgt = np.broadcast_to(np.asarray(target, dtype=np.int64), (n,))
    if samples < 1:
        raise ValueError("need at least one noise sample")
    if np.any(sig < 0):
        raise ValueError("noise scale sigma must be >= 0")
    if np.any(tgt < 0) or np.any(tgt >= c):
        raise ValueError("target class index out of range")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")

    if eps is None:
        eps = noise_samples(seed, n, samples, c)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (n, samples, c):
        raise ValueError(f"noise must have shape {(n, samples, c)}, got {eps.shape}")

    s_hat = s[:, None, :] + sig[:, None, None] * eps  # (N, T, C)
    lse = logsumexp(s_hat, axis=-1)  # (N, T)
    idx = np.arange(n)
    log_p = s_hat[idx, :, tgt] - lse  # (N, T) log-softmax at the correct class
    per_pixel = -(logsumexp(log_p, axis=1) - np.log(samples))

    # d/d s_hat of log_p_t is onehot - softmax; samples are weighted by their
    # share of the averaged likelihood
    w = np.exp(log_p - logsumexp(log_p, axis=1, keepdims=True))  # (N, T)
    probs = np.exp(s_hat - lse[..., None])
    onehot = np.zeros((n, 1, c))
    onehot[idx, 0, tgt] = 1.0
    d_shat = -w[..., None] * (onehot - probs)  # (N, T, C)
    grad_logits = d_shat.sum(axis=1)
    grad_sigma = np.einsum("ntc,ntc->n", d_shat, eps)

    loss = per_pixel.sum()
    if reduction == "mean":
        loss /= n
        grad_logits /= n
        grad_sigma /= n
    return float(loss), grad_logits, grad_sigma


def softmax_cross_entropy(logits, target) -> np.ndarray:
    s = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    tgt = np.asarray(target, dtype=np.int64).reshape(-1)
    return logsumexp(s, axis=-1) - s[np.arange(s.shape[0]), tgt]
