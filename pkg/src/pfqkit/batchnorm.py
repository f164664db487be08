"""Batch normalization: training/inference forward, backward, and folding.

Statistics are per channel. In training mode the batch mean uses the plain
1/N average and the batch variance is the biased 1/N moment; the running
variance update applies the N/(N-1) correction, where N counts the elements
contributing to one channel (batch times spatial extent). Running statistics
are part of the parameter record and updates are returned functionally; the
caller decides where to store them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor_ops import ensure_finite, ShapeError


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    rho: float = 0.9  # fraction of the old running value kept per update


@dataclass
class BatchStats:
    mu: np.ndarray
    sigma2: np.ndarray
    count: int


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def init_bn(channels, epsilon=1e-5, rho=0.9, dtype=np.float32):
    """Fresh parameters: unit scale, zero shift, running mean 0, running var 1."""
    return BNParams(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        epsilon=epsilon,
        rho=rho,
    )


def _axes_and_expand(x, channels):
    if x.ndim == 4:
        if x.shape[1] != channels:
            raise ShapeError(f"bn channel mismatch: input {x.shape[1]}, params {channels}")
        return (0, 2, 3), (1, channels, 1, 1)
    if x.ndim == 2:
        if x.shape[1] != channels:
            raise ShapeError(f"bn channel mismatch: input {x.shape[1]}, params {channels}")
        return (0,), (1, channels)
    raise ShapeError("bn expects 2-d or 4-d input")


def bn_forward_train(x, params):
    """Normalize with batch statistics and advance the running statistics.

    Returns (out, BatchStats, updated BNParams, BNCache).
    """
    ensure_finite("bn", x)
    c = params.gamma.shape[0]
    axes, shape = _axes_and_expand(x, c)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    if count < 2:
        raise ValueError(f"bn training needs at least 2 elements per channel, got {count}")

    mu = x.mean(axis=axes)
    centered = x - mu.reshape(shape)
    sigma2 = np.mean(centered * centered, axis=axes)
    inv_std = 1.0 / np.sqrt(sigma2 + params.epsilon)
    xhat = centered * inv_std.reshape(shape)
    out = xhat * params.gamma.reshape(shape) + params.beta.reshape(shape)

    rho = params.rho
    bessel = count / (count - 1)
    new_mean = params.running_mean * rho + mu * (1.0 - rho)
    new_var = params.running_var * rho + sigma2 * (1.0 - rho) * bessel
    updated = replace(
        params,
        running_mean=new_mean.astype(params.running_mean.dtype, copy=False),
        running_var=new_var.astype(params.running_var.dtype, copy=False),
    )
    stats = BatchStats(mu=mu, sigma2=sigma2, count=count)
    cache = BNCache(xhat=xhat, inv_std=inv_std, gamma=params.gamma)
    return out, stats, updated, cache


def bn_forward_infer(x, params):
    """Normalize with the stored running statistics."""
    ensure_finite("bn", x)
    c = params.gamma.shape[0]
    _, shape = _axes_and_expand(x, c)
    inv_std = 1.0 / np.sqrt(params.running_var + params.epsilon)
    scale = (params.gamma * inv_std).reshape(shape)
    shift = (params.beta - params.gamma * inv_std * params.running_mean).reshape(shape)
    return x * scale + shift


def bn_backward_train(grad_out, cache):
    """Gradients through the training-mode forward.

    Returns (grad_x, grad_gamma, grad_beta).
    """
    xhat = cache.xhat
    axes, shape = _axes_and_expand(xhat, cache.gamma.shape[0])
    count = 1
    for ax in axes:
        count *= xhat.shape[ax]

    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)

    g_mean = grad_out.mean(axis=axes).reshape(shape)
    gx_mean = (grad_out * xhat).mean(axis=axes).reshape(shape)
    grad_x = (cache.gamma * cache.inv_std).reshape(shape) * (grad_out - g_mean - xhat * gx_mean)
    return grad_x, grad_gamma, grad_beta


def bn_backward_infer(grad_out, params):
    c = params.gamma.shape[0]
    _, shape = _axes_and_expand(grad_out, c)
    inv_std = 1.0 / np.sqrt(params.running_var + params.epsilon)
    return grad_out * (params.gamma * inv_std).reshape(shape)


def fold_bn(conv, bn):
    """Fold a BN layer into the convolution that feeds it.

    conv is a ConvParams or DepthwiseConvParams; a new params object of the
    same type is returned, always carrying a bias. Uses the running statistics,
    so the folded conv reproduces inference-mode conv+BN.
    """
    factor = bn.gamma / np.sqrt(bn.running_var + bn.epsilon)
    out_ch = conv.weights.shape[0]
    if factor.shape[0] != out_ch:
        raise ShapeError(f"fold: conv has {out_ch} output channels, bn has {factor.shape[0]}")
    new_w = conv.weights * factor.reshape((out_ch,) + (1,) * (conv.weights.ndim - 1))
    old_b = conv.bias if conv.bias is not None else np.zeros(out_ch, dtype=conv.weights.dtype)
    new_b = factor * old_b + bn.beta - factor * bn.running_mean
    return type(conv)(
        weights=new_w.astype(conv.weights.dtype, copy=False),
        bias=new_b.astype(conv.weights.dtype, copy=False),
    )
