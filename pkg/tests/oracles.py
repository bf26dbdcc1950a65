"""Independent numpy reference computations used by the tests.

Nothing here imports the package: expectations under Gaussians are computed
by trapezoidal quadrature of the plain kernel and conditional formulas, so
they share no code path with the closed forms under test.
"""

import numpy as np

Z_MAX = 12.0


def se(a, b, ls):
    return np.exp(-((np.asarray(a, float) - np.asarray(b, float)) ** 2) / (2.0 * ls**2))


def _grid(sd, scale):
    """Trapezoid nodes and weights for E over z ~ N(0, 1).

    The trapezoid rule converges exponentially for smooth integrands that
    decay like a Gaussian, provided the step resolves the narrowest feature
    (``scale`` in activation units, i.e. ``scale / sd`` in z units).
    """
    h = min(1.0, scale / sd if sd > 0 else 1.0) / 8.0
    z = np.arange(-Z_MAX, Z_MAX + h / 2, h)
    w = h * np.exp(-0.5 * z**2) / np.sqrt(2.0 * np.pi)
    return z, w


def expect1(f, mu, var, scale=1.0):
    """E[f(A)] for A ~ N(mu, var); ``f`` maps an array of nodes to (nodes, ...)."""
    if var == 0:
        return np.asarray(f(np.array([float(mu)])))[0]
    sd = np.sqrt(var)
    z, w = _grid(sd, scale)
    return np.tensordot(w, np.asarray(f(mu + sd * z)), axes=(0, 0))


def expect_product(fa, fb, mean, cov, scale=1.0):
    """E[fa(A)^T fb(B)] -> (P, Q) for (A, B) ~ N(mean, cov).

    ``fa`` and ``fb`` map node arrays to (nodes, P) and (nodes, Q).  B is
    written as its regression on A plus independent noise.
    """
    (mu_a, mu_b), ((va, c), (_, vb)) = mean, cov
    if va == 0:
        return np.outer(fa(np.array([float(mu_a)]))[0], expect1(fb, mu_b, vb, scale))
    sa = np.sqrt(va)
    slope = c / sa
    resid = max(vb - c**2 / va, 0.0)
    z1, w1 = _grid(sa, scale)
    if resid > 0:
        z2, w2 = _grid(np.sqrt(resid), scale)
    else:
        z2, w2 = np.zeros(1), np.ones(1)
    b = mu_b + slope * z1[:, None] + np.sqrt(resid) * z2[None, :]
    fb_vals = np.asarray(fb(b.ravel())).reshape(len(z1), len(z2), -1)
    inner = np.tensordot(fb_vals, w2, axes=(1, 0))  # (N1, Q)
    return (np.asarray(fa(mu_a + sa * z1)) * w1[:, None]).T @ inner


def psi(mu, var, v, ls):
    return expect1(lambda a: se(a[:, None], v[None, :], ls), mu, var, ls)


def omega(mu, var, v, ls):
    def f(a):
        k = se(a[:, None], v[None, :], ls)
        return k[:, :, None] * k[:, None, :]

    return expect1(f, mu, var, ls)


def lambda_nm(mu_n, mu_m, var_n, var_m, cov_nm, v_n, v_m, ls_n, ls_m):
    """Entry [r, t] = E[k(A_m, v_m[r]) k(A_n, v_n[t])]."""
    return expect_product(
        lambda am: se(am[:, None], v_m[None, :], ls_m),
        lambda an: se(an[:, None], v_n[None, :], ls_n),
        (mu_m, mu_n), ((var_m, cov_nm), (cov_nm, var_n)), min(ls_n, ls_m),
    )


def conditional(a, v, ls, kinv, beta, extra=None):
    """Mean and variance of F given scalar activations ``a`` (array).

    ``kinv`` is the inverse of the (regularized) Gram matrix and ``beta`` the
    dual weights; ``extra`` adds k^T extra k to the variance (variational case).
    """
    k = se(np.asarray(a)[:, None], v[None, :], ls)
    mean = k @ beta
    var = 1.0 - np.einsum("sr,rt,st->s", k, kinv, k)
    if extra is not None:
        var = var + np.einsum("sr,rt,st->s", k, extra, k)
    return mean, var


def unit_terms(v, u, s, ls, sigma_u=None):
    """(kinv, beta, extra) for the ML (``sigma_u is None``) or variational case."""
    gram = se(v[:, None], v[None, :], ls)
    if sigma_u is None:
        kinv = np.linalg.inv(gram + np.diag(s))
        return kinv, kinv @ u, None
    kinv = np.linalg.inv(gram)
    return kinv, kinv @ u, kinv @ sigma_u @ kinv


def layer_moments(mu, cov, v, u, s, ls, noise, sigma_u=None):
    """Output mean, variance and covariance of one layer by quadrature.

    ``v, u, s`` are (N, R); ``ls, noise`` are (N,); ``sigma_u`` is (N, R, R)
    for the variational case, in which ``u`` holds the posterior means.
    """
    n = len(mu)
    terms = [unit_terms(v[i], u[i], s[i], ls[i], None if sigma_u is None else sigma_u[i]) for i in range(n)]
    mean = np.zeros(n)
    var = np.zeros(n)
    for i in range(n):
        kinv, beta, extra = terms[i]

        def f(a, i=i, kinv=kinv, beta=beta, extra=extra):
            m, cv = conditional(a, v[i], ls[i], kinv, beta, extra)
            return np.stack([m, m**2, cv], axis=1)

        e = expect1(f, mu[i], cov[i][i], ls[i])
        mean[i] = e[0]
        var[i] = e[2] + e[1] - e[0] ** 2 + noise[i] ** 2
    out = np.diag(var)
    for i in range(n):
        for j in range(i + 1, n):
            mi = lambda a, i=i: conditional(a, v[i], ls[i], terms[i][0], terms[i][1])[0][:, None]
            mj = lambda a, j=j: conditional(a, v[j], ls[j], terms[j][0], terms[j][1])[0][:, None]
            c = expect_product(mi, mj, (mu[i], mu[j]), ((cov[i][i], cov[i][j]), (cov[j][i], cov[j][j])),
                               min(ls[i], ls[j]))[0, 0]
            out[i, j] = out[j, i] = c - mean[i] * mean[j]
    return mean, var, out


def gaussian_condition(x, y, xs, ls, noise):
    """Brute-force conditioning of the joint normal over (f(xs), y)."""
    pts = np.concatenate([x, xs])
    joint = se(pts[:, None], pts[None, :], ls)
    n = len(x)
    kxx = joint[:n, :n] + noise * np.eye(n)
    ksx = joint[n:, :n]
    kss = joint[n:, n:]
    mean = ksx @ np.linalg.solve(kxx, y)
    cov = kss - ksx @ np.linalg.solve(kxx, ksx.T)
    return mean, cov


def kl_gauss(mu_q, cov_q, cov_p):
    """KL(N(mu_q, cov_q) || N(0, cov_p))."""
    r = len(mu_q)
    inv = np.linalg.inv(cov_p)
    _, ld_p = np.linalg.slogdet(cov_p)
    _, ld_q = np.linalg.slogdet(cov_q)
    return 0.5 * (np.trace(inv @ cov_q) + mu_q @ inv @ mu_q - r + ld_p - ld_q)


def mc_mean(samples):
    """Sample mean and its standard error along axis 0."""
    samples = np.asarray(samples, float)
    n = samples.shape[0]
    return samples.mean(0), samples.std(0, ddof=1) / np.sqrt(n)
