"""Deterministic training objectives.

All functions return quantities to *minimize*, except :func:`elbo_pred_term`
which is the expected log-likelihood term of the evidence lower bound and is
returned with its natural sign.
"""

from dataclasses import dataclass

import torch

from . import kernels
from .errors import DimensionMismatch
from .linalg import as_tensor, chol_logdet, jittered_cholesky
from .network import Mode


@dataclass
class SigmaPointSet:
    points: torch.Tensor  # (..., 2n+1, n); point 0 is the mean
    weights: torch.Tensor  # (2n+1,)
    kappa_u: float


def _expected_sq_response(final, sigma):
    """E[F^2] of the last layer's responses, i.e. without the output noise."""
    if final.var is None:
        return final.mean**2
    return final.var - sigma**2 + final.mean**2


def _check_targets(final, targets):
    if targets.shape != final.mean.shape:
        raise DimensionMismatch(
            f"targets have shape {tuple(targets.shape)}, predictions {tuple(final.mean.shape)}"
        )


def regression_nll(final, targets, sigma):
    """Upper bound of the negative log-likelihood of real-valued targets.

    Summed over samples and outputs; additive constants (``log 2 pi``) are
    dropped.
    """
    targets, sigma = as_tensor(targets), as_tensor(sigma)
    _check_targets(final, targets)
    ef = final.mean
    ef2 = _expected_sq_response(final, sigma)
    n = targets.shape[0]
    sq = (targets**2 - 2.0 * targets * ef + ef2) / sigma**2
    return n * torch.log(sigma).sum() + 0.5 * sq.sum()


def elbo_pred_term(final, targets, sigma):
    """Expected log-likelihood of the targets (up to the ``log 2 pi`` constant)."""
    return -regression_nll(final, targets, sigma)


def softmax(o):
    o = as_tensor(o)
    z = torch.exp(o - o.max(dim=-1, keepdim=True).values)
    return z / z.sum(-1, keepdim=True)


def log_softmax(o):
    return o - torch.logsumexp(o, dim=-1, keepdim=True)


def sigma_weights(n, kappa_u):
    if n + kappa_u <= 0:
        raise ValueError(f"kappa_u={kappa_u} requires n + kappa_u > 0 (n={n})")
    w = torch.full((2 * n + 1,), 1.0 / (2.0 * (n + kappa_u)), dtype=torch.float64)
    w[0] = kappa_u / (n + kappa_u)
    return w


def _spread(offsets, mean):
    # offsets (..., n, n): column j is the j-th spread direction
    cols = offsets.transpose(-1, -2)
    m = mean[..., None, :]
    return torch.cat([m, m + cols, m - cols], dim=-2)


def sigma_points(mean, cov, kappa_u=None):
    """Unscented sigma points of N(mean, cov); default ``kappa_u = 3 - n``.

    The spread directions are the columns of the lower Cholesky factor of
    ``(n + kappa_u) cov``, so the weighted points reproduce mean and
    covariance exactly.  Batches along leading dimensions are supported.
    """
    mean, cov = as_tensor(mean), as_tensor(cov)
    n = mean.shape[-1]
    if cov.shape[-2:] != (n, n):
        raise DimensionMismatch("cov must be n x n for a mean of length n")
    kappa_u = 3.0 - n if kappa_u is None else float(kappa_u)
    weights = sigma_weights(n, kappa_u)
    scaled = (n + kappa_u) * cov
    if not bool(scaled.detach().any()):
        factor = torch.zeros_like(scaled)
    else:
        factor, _ = jittered_cholesky(0.5 * (scaled + scaled.transpose(-1, -2)))
    return SigmaPointSet(_spread(factor, mean), weights, kappa_u)


def diagonal_sigma_points(mean, var, kappa_u=None):
    """Sigma points for a diagonal covariance; the Cholesky factor is a square root."""
    mean, var = as_tensor(mean), as_tensor(var)
    n = mean.shape[-1]
    kappa_u = 3.0 - n if kappa_u is None else float(kappa_u)
    weights = sigma_weights(n, kappa_u)
    factor = torch.diag_embed(torch.sqrt((n + kappa_u) * var))
    return SigmaPointSet(_spread(factor, mean), weights, kappa_u)


def output_sigma_points(final, kappa_u=None):
    """Sigma points of the last layer's output distribution for each sample."""
    if final.mode is Mode.MEAN:
        n = final.width
        kappa_u = 3.0 - n if kappa_u is None else float(kappa_u)
        return SigmaPointSet(
            _spread(torch.zeros(final.mean.shape + (n,), dtype=final.mean.dtype), final.mean),
            sigma_weights(n, kappa_u),
            kappa_u,
        )
    if final.mode is Mode.MEAN_VAR:
        return diagonal_sigma_points(final.mean, final.var, kappa_u)
    return sigma_points(final.mean, final.cov, kappa_u)


def expected_log_softmax(final, out_w, targets_onehot, kappa_u=None):
    """Unscented estimate of E[T . log softmax(X W)] per sample, shape ``(S,)``.

    Sigma points are placed on the distribution of the last GPN layer and
    mapped through the linear head, which reproduces the first two moments
    of the logits exactly.
    """
    out_w, targets = as_tensor(out_w), as_tensor(targets_onehot)
    if out_w.shape[0] != final.width or targets.shape != (final.n_samples, out_w.shape[1]):
        raise DimensionMismatch("head weights or targets do not match the network output")
    sp = output_sigma_points(final, kappa_u)
    logits = sp.points @ out_w  # (S, 2n+1, C)
    ll = (log_softmax(logits) * targets[:, None, :]).sum(-1)
    return ll @ sp.weights


def classification_loss(final, out_w, targets_onehot, kappa_u=None):
    """Mean unscented softmax cross-entropy over samples."""
    return -expected_log_softmax(final, out_w, targets_onehot, kappa_u).mean()


def s_penalty(net, alpha=0.1, beta=1e-3):
    """Penalty discouraging virtual observation variances from collapsing to zero."""
    total = 0.0
    for layer in net.layers:
        s = layer.obs_var
        total = total + (alpha * torch.sigmoid(beta / s.abs())).mean()
    return total


def _prior_factors(layer):
    v, _, _ = layer.unit_obs()
    L, _ = jittered_cholesky(kernels.kernel_matrix(v, v, layer.lengthscale))
    return L


def elbo_reg_term(net, posterior):
    """KL-type regularizer between posterior and prior targets, without the constant.

    0.5 * sum over units of tr(K^-1 Sigma) + mu^T K^-1 mu + log|K| - log|Sigma|.
    """
    total = 0.0
    for layer, post in zip(net.layers, posterior.layers):
        L = _prior_factors(layer)
        factor = post.factor()
        # triangular solves keep both terms accurate for ill-conditioned K
        whitened = torch.linalg.solve_triangular(L, factor, upper=False)
        trace = (whitened**2).sum((-1, -2))
        wmu = torch.linalg.solve_triangular(L, post.mu_u[..., None], upper=False)[..., 0]
        quad = (wmu**2).sum(-1)
        logdet = chol_logdet(L) - chol_logdet(factor)
        total = total + 0.5 * (trace + quad + logdet).sum()
    return total


def kl_divergence(net, posterior):
    """Sum over units of KL(Q(U) || P(U)): the regularizer plus its dropped constant."""
    n_obs = sum(layer.n_units * layer.r_count for layer in net.layers)
    return elbo_reg_term(net, posterior) - 0.5 * n_obs
