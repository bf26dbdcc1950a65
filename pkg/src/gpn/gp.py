"""Exact and sparse GP regression for scalar inputs.

These are the reference computations the network code is checked against:
a zero-mean GP conditioned on data, the prediction obtained from a set of
virtual observations, and the marginal output covariance of a single
non-parametric GPN.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .kernels import gpn_cov, kernel_matrix
from .linalg import DEFAULT_JITTER, as_tensor, chol_solve, jittered_cholesky


@dataclass
class VirtualObservations:
    """Inducing points ``v``, targets ``u`` and target variances ``s`` of one unit."""

    v: torch.Tensor
    u: torch.Tensor
    s: torch.Tensor

    def __post_init__(self):
        self.v, self.u, self.s = as_tensor(self.v), as_tensor(self.u), as_tensor(self.s)
        if not (self.v.shape == self.u.shape == self.s.shape) or self.v.ndim != 1:
            raise ValueError("v, u and s must be vectors of equal length")
        if len(self.v) < 1:
            raise ValueError("need at least one virtual observation")
        if bool((self.s < 0).any()):
            raise ValueError("observation variances must be nonnegative")

    def __len__(self):
        return len(self.v)


ACTIVATIONS = {
    "tanh": np.tanh,
    "relu": lambda a: np.maximum(0.0, a),
    "identity": lambda a: np.asarray(a, dtype=float),
}


def gp_regress(train_x, train_y, test_x, lengthscale, noise_var):
    """Posterior mean and covariance of a zero-mean SE GP at ``test_x``.

    The returned covariance is that of the latent function (no observation
    noise on the test points).
    """
    train_x, train_y, test_x = as_tensor(train_x), as_tensor(train_y), as_tensor(test_x)
    ls = as_tensor(lengthscale)
    k_ss = kernel_matrix(test_x, test_x, ls)
    if train_x.numel() == 0:
        return torch.zeros(len(test_x), dtype=k_ss.dtype), k_ss
    k_xx = kernel_matrix(train_x, train_x, ls)
    k_sx = kernel_matrix(test_x, train_x, ls)
    eye = torch.eye(len(train_x), dtype=k_xx.dtype)
    L, _ = jittered_cholesky(k_xx + noise_var * eye, DEFAULT_JITTER)
    mean = k_sx @ chol_solve(L, train_y)
    cov = k_ss - k_sx @ chol_solve(L, k_sx.T)
    return mean, 0.5 * (cov + cov.T)


def sparse_predict(activations, obs, lengthscale, noise_var):
    """Predictive output moments of a GPN given its virtual observations.

    mean = K(a, V) [K(V, V) + diag(S)]^-1 U
    cov  = K(a, a) - K(a, V) [K(V, V) + diag(S)]^-1 K(V, a) + noise_var I
    """
    a = as_tensor(activations)
    ls = as_tensor(lengthscale)
    k_vv = kernel_matrix(obs.v, obs.v, ls) + torch.diag(obs.s)
    L, _ = jittered_cholesky(k_vv)
    k_av = kernel_matrix(a, obs.v, ls)
    mean = k_av @ chol_solve(L, obs.u)
    cov = kernel_matrix(a, a, ls) - k_av @ chol_solve(L, k_av.T)
    cov = 0.5 * (cov + cov.T) + noise_var * torch.eye(len(a), dtype=cov.dtype)
    return mean, cov


def nonparam_marginal_cov(x_prev, w, lengthscale, noise_var):
    """Marginal covariance over samples of one non-parametric GPN's outputs."""
    x = as_tensor(x_prev)
    w = as_tensor(w)
    k = gpn_cov(x[:, None, :], x[None, :, :], w, lengthscale)
    return k + noise_var * torch.eye(x.shape[0], dtype=k.dtype)


def fit_activation(target, r_count, interval=(-2.0, 2.0), noise=1e-4):
    """Virtual observations placing ``r_count`` equidistant points on ``target``."""
    if r_count < 2:
        raise ValueError("r_count must be at least 2")
    lo, hi = interval
    if not lo < hi:
        raise ValueError("interval must satisfy lo < hi")
    fn = ACTIVATIONS[target] if isinstance(target, str) else target
    v = np.linspace(lo, hi, r_count)
    u = np.asarray(fn(v), dtype=float)
    return VirtualObservations(v, u, np.full(r_count, float(noise)))
