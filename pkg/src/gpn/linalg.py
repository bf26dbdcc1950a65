"""Dense Cholesky primitives used for every kernel-matrix inversion.

All functions accept a single matrix or a batch of matrices stacked along
leading dimensions and work in double precision.
"""

import numpy as np
import torch

from .errors import DimensionMismatch, JitterExhausted, NotPositiveDefinite

DTYPE = torch.float64
DEFAULT_JITTER = 1e-8
JITTER_STEPS = 7  # 0, j0, 10 j0, ..., 1e6 j0

_SYMMETRY_RTOL = 1e-10


def as_tensor(x):
    """Return ``x`` as a float64 tensor (no copy when already one)."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    if isinstance(x, np.ndarray) and not x.flags.writeable:
        x = x.copy()
    return torch.as_tensor(x, dtype=DTYPE)


def _check_square(a):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionMismatch(f"expected square matrix, got shape {tuple(a.shape)}")


def _check_symmetric(a):
    a = a.detach()
    scale = torch.linalg.matrix_norm(a).clamp_min(1.0)
    asym = torch.linalg.matrix_norm(a - a.transpose(-1, -2))
    if bool((asym > _SYMMETRY_RTOL * scale).any()):
        raise ValueError("matrix is not symmetric")


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises NotPositiveDefinite if any pivot is not positive.
    """
    a = as_tensor(a)
    _check_square(a)
    _check_symmetric(a)
    L, info = torch.linalg.cholesky_ex(a)
    if bool((info > 0).any()):
        raise NotPositiveDefinite("matrix is not positive definite; add jitter")
    return L


def jitter_levels(jitter0=DEFAULT_JITTER):
    return [0.0] + [jitter0 * 10.0**k for k in range(JITTER_STEPS)]


def select_jitter(a, jitter0=DEFAULT_JITTER):
    """Smallest jitter level per matrix for which ``a + jitter I`` factorizes.

    Returns a tensor with the batch shape of ``a`` (a 0-d tensor for one matrix).
    """
    a = as_tensor(a).detach()
    _check_square(a)
    n = a.shape[-1]
    eye = torch.eye(n, dtype=a.dtype)
    jitter = torch.zeros(a.shape[:-2], dtype=a.dtype)
    pending = torch.ones(a.shape[:-2], dtype=torch.bool)
    for level in jitter_levels(jitter0):
        _, info = torch.linalg.cholesky_ex(a + level * eye)
        ok = (info == 0) & pending
        jitter = torch.where(ok, torch.full_like(jitter, level), jitter)
        pending = pending & ~ok
        if not bool(pending.any()):
            return jitter
    raise JitterExhausted(
        f"Cholesky failed up to jitter {jitter_levels(jitter0)[-1]:.1e}"
    )


def jittered_cholesky(a, jitter0=DEFAULT_JITTER):
    """Factor ``a + jitter I`` with the smallest jitter from the escalation ladder.

    The ladder is ``0, jitter0, 10 jitter0, ..., 1e6 jitter0``, chosen
    independently for each matrix of a batch. The factorization itself is
    differentiable with respect to ``a``; the jitter choice is treated as a
    constant.

    Returns:
        ``(L, jitter_used)`` where ``jitter_used`` is a float for a single
        matrix and a tensor of the batch shape otherwise.
    """
    a = as_tensor(a)
    _check_square(a)
    _check_symmetric(a)
    jitter = select_jitter(a, jitter0)
    n = a.shape[-1]
    eye = torch.eye(n, dtype=a.dtype)
    L = torch.linalg.cholesky(a + jitter[..., None, None] * eye)
    if a.ndim == 2:
        return L, float(jitter)
    return L, jitter


def chol_solve(factor, b):
    """Solve ``(L L^T) x = b`` given the lower factor ``L``.

    ``b`` may be a vector or a matrix (or batches of either, matching the
    batch dimensions of ``factor``).
    """
    factor = as_tensor(factor)
    b = as_tensor(b)
    _check_square(factor)
    vector = b.ndim == factor.ndim - 1
    if vector:
        b = b.unsqueeze(-1)
    if b.shape[-2] != factor.shape[-1]:
        raise DimensionMismatch(
            f"factor is {factor.shape[-1]}x{factor.shape[-1]} but b has {b.shape[-2]} rows"
        )
    x = torch.cholesky_solve(b, factor)
    return x.squeeze(-1) if vector else x


def chol_inverse(factor):
    """Inverse of ``L L^T`` from its lower factor."""
    factor = as_tensor(factor)
    eye = torch.eye(factor.shape[-1], dtype=factor.dtype).expand(factor.shape)
    return torch.cholesky_solve(eye, factor)


def chol_logdet(factor):
    """log |L L^T|."""
    return 2.0 * torch.log(torch.diagonal(factor, dim1=-2, dim2=-1).abs()).sum(-1)
