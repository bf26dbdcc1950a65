"""Squared-exponential kernel and its expectations under Gaussian inputs.

Every function broadcasts over leading dimensions, so the same code path
serves scalar calls in tests and the batched ``(samples, units, R)`` tensors
used during propagation.
"""

import contextlib

import torch

from .errors import DimensionMismatch, NotPsd
from .linalg import as_tensor

DET_FLOOR = 1e-12

# Names of expectations whose exponent sign is deliberately flipped.  Only used
# as a negative control for the Monte-Carlo verification suite.
_flipped = set()


@contextlib.contextmanager
def flipped_exponent_sign(*names):
    """Corrupt the exponent sign of ``"psi"``, ``"omega"`` and/or ``"lambda"``.

    Oracles run inside this context must fail; it exists to demonstrate that
    they are sensitive to exactly this kind of derivation error.
    """
    added = set(names) - _flipped
    _flipped.update(added)
    try:
        yield
    finally:
        _flipped.difference_update(added)


def _sign(name):
    return 1.0 if name in _flipped else -1.0


def se_kernel(a, a_prime, lengthscale):
    """exp(-(a - a')^2 / (2 lengthscale^2)), broadcasting elementwise."""
    a, a_prime, ls = as_tensor(a), as_tensor(a_prime), as_tensor(lengthscale)
    return torch.exp(-((a - a_prime) ** 2) / (2.0 * ls**2))


def gpn_cov(x, x_prime, w, lengthscale):
    """GPN covariance: SE kernel applied to the projections ``w.x`` and ``w.x'``."""
    x, x_prime, w = as_tensor(x), as_tensor(x_prime), as_tensor(w)
    if x.shape[-1] != w.shape[-1] or x_prime.shape[-1] != w.shape[-1]:
        raise DimensionMismatch("x, x_prime and w must have the same length")
    proj = ((x - x_prime) * w).sum(-1)
    return torch.exp(-(proj**2) / (2.0 * as_tensor(lengthscale) ** 2))


def kernel_matrix(a, b, lengthscale):
    """K[..., i, j] = se_kernel(a[..., i], b[..., j]).

    ``lengthscale`` broadcasts against the leading (batch) dimensions.
    """
    a, b, ls = as_tensor(a), as_tensor(b), as_tensor(lengthscale)
    d = a[..., :, None] - b[..., None, :]
    return torch.exp(-(d**2) / (2.0 * ls[..., None, None] ** 2))


def psi(mu, var, v, lengthscale):
    """E[k(A, v_r)] for A ~ N(mu, var); returns shape ``(..., R)``."""
    mu, var, v, ls = as_tensor(mu), as_tensor(var), as_tensor(v), as_tensor(lengthscale)
    l2 = ls**2
    denom = (l2 + var)[..., None]
    scale = torch.sqrt(l2[..., None] / denom)
    return scale * torch.exp(_sign("psi") * (mu[..., None] - v) ** 2 / (2.0 * denom))


def omega(mu, var, v, lengthscale):
    """E[k(A, v_r) k(A, v_t)] for A ~ N(mu, var); returns shape ``(..., R, R)``."""
    mu, var, v, ls = as_tensor(mu), as_tensor(var), as_tensor(v), as_tensor(lengthscale)
    l2 = (ls**2)[..., None, None]
    denom = l2 + 2.0 * var[..., None, None]
    vr = v[..., :, None]
    vt = v[..., None, :]
    mid = (vr + vt) / 2.0
    expo = (mu[..., None, None] - mid) ** 2 / denom + (vr - vt) ** 2 / (4.0 * l2)
    return torch.sqrt(l2 / denom) * torch.exp(_sign("omega") * expo)


def any_flipped():
    return bool(_flipped)


def omega_log_ratio(mu, var, v, lengthscale):
    """log(omega[..., r, t] / (psi[..., r] psi[..., t])), shape ``(..., R, R)``.

    Every term is proportional to ``var``, so ``expm1`` of the result gives
    the covariance factor of the kernel values without cancellation.
    """
    mu, var, v, ls = as_tensor(mu), as_tensor(var), as_tensor(v), as_tensor(lengthscale)
    l2 = ls**2
    d1 = l2 + var
    d2 = l2 + 2.0 * var
    alpha = var / (4.0 * d1 * d2)
    gamma = var / (4.0 * l2 * d1)
    c0 = 0.5 * torch.log1p(var**2 / (l2 * d2))
    a = mu[..., None] - v
    q = (alpha - gamma)[..., None] * a**2
    p = (2.0 * (alpha + gamma))[..., None] * a
    return (c0[..., None] + q)[..., :, None] + q[..., None, :] + p[..., :, None] * a[..., None, :]


def cross_log_ratio(mu_a, mu_b, var_a, var_b, cov_ab, v_a, v_b, ls_a, ls_b):
    """log of cross_expectation over the product of the two marginal psi vectors."""
    mu_a, mu_b = as_tensor(mu_a), as_tensor(mu_b)
    var_a, var_b, c = as_tensor(var_a), as_tensor(var_b), as_tensor(cov_ab)
    pa = as_tensor(ls_a) ** 2 + var_a
    pb = as_tensor(ls_b) ** 2 + var_b
    raw_det = pa * pb - c**2
    det = raw_det.clamp_min(DET_FLOOR)
    da = mu_a[..., None] - as_tensor(v_a)
    db = mu_b[..., None] - as_tensor(v_b)
    c0 = torch.where(
        raw_det > DET_FLOOR, -0.5 * torch.log1p(-(c**2) / (pa * pb)), -0.5 * torch.log(det / (pa * pb))
    )
    qa = (-(c**2) / (2.0 * pa * det))[..., None] * da**2
    qb = (-(c**2) / (2.0 * pb * det))[..., None] * db**2
    return (c0[..., None] + qa)[..., :, None] + qb[..., None, :] + (
        (c / det)[..., None] * da
    )[..., :, None] * db[..., None, :]


def cross_expectation(mu_a, mu_b, var_a, var_b, cov_ab, v_a, v_b, ls_a, ls_b):
    """E[k(A_a, v_a[r]; ls_a) k(A_b, v_b[t]; ls_b)] for jointly normal (A_a, A_b).

    Returns shape ``(..., R_a, R_b)``. A near-singular determinant of the
    regularized moment matrix is clamped at ``DET_FLOOR``.
    """
    mu_a, mu_b = as_tensor(mu_a), as_tensor(mu_b)
    var_a, var_b, cov_ab = as_tensor(var_a), as_tensor(var_b), as_tensor(cov_ab)
    v_a, v_b = as_tensor(v_a), as_tensor(v_b)
    ls_a, ls_b = as_tensor(ls_a), as_tensor(ls_b)

    pa = ls_a**2 + var_a
    pb = ls_b**2 + var_b
    det = (pa * pb - cov_ab**2).clamp_min(DET_FLOOR)
    da = (mu_a[..., None] - v_a)[..., :, None]
    db = (mu_b[..., None] - v_b)[..., None, :]
    pa, pb, c, det_ = (t[..., None, None] for t in (pa, pb, cov_ab, det))
    quad = da**2 * pb + db**2 * pa - 2.0 * c * da * db
    scale = (ls_a * ls_b)[..., None, None] / torch.sqrt(det_)
    return scale * torch.exp(_sign("lambda") * quad / (2.0 * det_))


def lambda_cross(mu_n, mu_m, var_n, var_m, cov_nm, v_n, v_m, ls_n, ls_m):
    """Cross-unit kernel product expectation.

    Entry ``[r, t]`` is E[k(A_m, v_m[r]; ls_m) k(A_n, v_n[t]; ls_n)] under the
    bivariate normal with the given moments, so that ``cov_nm = 0`` gives
    ``outer(psi(mu_m, ...), psi(mu_n, ...))``.
    """
    var_n, var_m, cov_nm = as_tensor(var_n), as_tensor(var_m), as_tensor(cov_nm)
    if bool((var_n * var_m - cov_nm**2 < -1e-12).any()) or bool(
        ((var_n < 0) | (var_m < 0)).any()
    ):
        raise NotPsd("input moment matrix [[var_n, cov], [cov, var_m]] is not PSD")
    return cross_expectation(mu_m, mu_n, var_m, var_n, cov_nm, v_m, v_n, ls_m, ls_n)

