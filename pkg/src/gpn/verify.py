"""Monte-Carlo oracles and the experiment harness.

The oracles are written in plain numpy and share no code with the analytic
implementation beyond reading parameter values, so agreement between the
two is meaningful evidence.
"""

import csv
import os
import resource
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from . import data as data_mod
from . import kernels
from . import network as nw
from . import objectives as obj
from . import training as tr
from .gp import ACTIVATIONS, fit_activation, sparse_predict
from .linalg import as_tensor

MC_ATOL = 1e-12  # absolute slack for entries whose sampling error is exactly zero
DEFAULT_DRAWS = 10**6
CHUNK = 100_000


@dataclass
class McReport:
    """Comparison of an analytic quantity with a Monte-Carlo estimate, entrywise."""

    name: str
    analytic: np.ndarray
    mc_estimate: np.ndarray
    mc_stderr: np.ndarray
    n_draws: int
    seed: int
    n_sigma: float = 3.0

    def __post_init__(self):
        self.analytic = np.asarray(self.analytic, dtype=float)
        self.mc_estimate = np.asarray(self.mc_estimate, dtype=float)
        self.mc_stderr = np.asarray(self.mc_stderr, dtype=float)

    @property
    def z(self):
        err = np.abs(self.analytic - self.mc_estimate)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.mc_stderr > 0, err / self.mc_stderr, np.where(err > MC_ATOL, np.inf, 0.0))

    @property
    def entry_passed(self):
        err = np.abs(self.analytic - self.mc_estimate)
        return err <= self.n_sigma * self.mc_stderr + MC_ATOL

    @property
    def n_entries(self):
        return int(self.analytic.size)

    @property
    def n_passed(self):
        return int(self.entry_passed.sum())

    @property
    def passed(self):
        return bool(self.entry_passed.all())


def _mean_stderr(s1, s2, n):
    mean = s1 / n
    var = np.maximum(s2 / n - mean**2, 0.0)
    return mean, np.sqrt(var / n)


def _se(a, v, ls):
    return np.exp(-((a[..., None] - v) ** 2) / (2.0 * ls**2))


def _chunks(n_draws, chunk=CHUNK):
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        yield m
        done += m


# --------------------------------------------------------------------------
# kernel expectations


def random_kernel_case(rng, max_r=8):
    """Random parameters for psi/omega (``mu, var, v, ls``) and lambda (pairs)."""
    r = int(rng.integers(1, max_r + 1))
    r2 = int(rng.integers(1, max_r + 1))
    var_n, var_m = rng.uniform(0.01, 2.0, size=2)
    rho = rng.uniform(-0.95, 0.95)
    return {
        "mu": rng.normal(),
        "var": rng.uniform(0.01, 2.0),
        "v": rng.uniform(-2.0, 2.0, size=r),
        "ls": rng.uniform(0.3, 2.0),
        "mu_n": rng.normal(),
        "mu_m": rng.normal(),
        "var_n": var_n,
        "var_m": var_m,
        "cov_nm": rho * np.sqrt(var_n * var_m),
        "v_n": rng.uniform(-2.0, 2.0, size=r2),
        "v_m": rng.uniform(-2.0, 2.0, size=r),
        "ls_n": rng.uniform(0.3, 2.0),
        "ls_m": rng.uniform(0.3, 2.0),
    }


def analytic_kernel(kind, case):
    c = {k: as_tensor(np.asarray(v, dtype=float)) for k, v in case.items()}
    if kind == "psi":
        out = kernels.psi(c["mu"], c["var"], c["v"], c["ls"])
    elif kind == "omega":
        out = kernels.omega(c["mu"], c["var"], c["v"], c["ls"])
    elif kind == "lambda":
        out = kernels.lambda_cross(
            c["mu_n"], c["mu_m"], c["var_n"], c["var_m"], c["cov_nm"],
            c["v_n"], c["v_m"], c["ls_n"], c["ls_m"],
        )
    else:
        raise ValueError(f"unknown kernel expectation {kind!r}")
    return out.numpy()


def mc_kernel(kind, case, n_draws=DEFAULT_DRAWS, seed=0):
    """Sampling estimate of psi, omega or lambda with per-entry standard errors."""
    rng = np.random.default_rng(seed)
    s1 = s2 = 0.0
    for m in _chunks(n_draws):
        if kind == "lambda":
            cov = np.array([[case["var_m"], case["cov_nm"]], [case["cov_nm"], case["var_n"]]])
            a = rng.multivariate_normal([case["mu_m"], case["mu_n"]], cov, size=m, method="eigh")
            k1 = _se(a[:, 0], case["v_m"], case["ls_m"])
            k2 = _se(a[:, 1], case["v_n"], case["ls_n"])
            s1 = s1 + k1.T @ k2
            s2 = s2 + (k1**2).T @ (k2**2)
            continue
        a = case["mu"] + np.sqrt(case["var"]) * rng.standard_normal(m)
        k = _se(a, case["v"], case["ls"])
        if kind == "psi":
            s1 = s1 + k.sum(0)
            s2 = s2 + (k**2).sum(0)
        elif kind == "omega":
            s1 = s1 + k.T @ k
            s2 = s2 + (k**2).T @ (k**2)
        else:
            raise ValueError(f"unknown kernel expectation {kind!r}")
    return _mean_stderr(s1, s2, n_draws)


def check_kernel(kind, case, n_draws=DEFAULT_DRAWS, seed=0):
    est, se = mc_kernel(kind, case, n_draws, seed)
    return McReport(kind, analytic_kernel(kind, case), est, se, n_draws, seed)


def kernel_oracle_suite(n_cases=100, n_draws=DEFAULT_DRAWS, seed=0, kinds=("psi", "omega", "lambda")):
    """One report per (case, kind); case parameters come from ``seed``."""
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_cases):
        case = random_kernel_case(rng)
        for kind in kinds:
            reports.append(check_kernel(kind, case, n_draws, tr.derive_seed(seed, f"{kind}{i}")))
    return reports


# --------------------------------------------------------------------------
# layer propagation


@dataclass
class LayerCase:
    layer: nw.LayerParams
    posterior: nw.LayerPosterior
    a_mean: np.ndarray
    a_cov: np.ndarray


def random_layer_case(rng, max_width=6, max_r=8):
    n = int(rng.integers(1, max_width + 1))
    r = int(rng.integers(2, max_r + 1))
    v = np.linspace(-2.0, 2.0, r) + rng.uniform(-0.1, 0.1, size=(n, r))
    b = rng.normal(0.0, 0.6, size=(n, n))
    a_cov = b @ b.T + np.diag(rng.uniform(0.05, 0.5, size=n))
    chol = np.tril(rng.normal(0.0, 0.2, size=(n, r, r)), -1)
    chol += np.einsum("nr,rt->nrt", rng.uniform(0.05, 0.4, size=(n, r)), np.eye(r))
    layer = nw.LayerParams(
        weights=torch.eye(n, dtype=torch.float64),
        raw_lengthscale=nw.inverse_softplus(as_tensor(rng.uniform(0.5, 1.5, size=n))),
        raw_noise=nw.inverse_softplus(as_tensor(rng.uniform(0.05, 0.3, size=n))),
        inducing=as_tensor(v),
        targets=as_tensor(rng.normal(size=(n, r))),
        raw_obs_var=nw.inverse_softplus(as_tensor(rng.uniform(0.01, 0.5, size=(n, r)))),
    )
    post = nw.LayerPosterior(as_tensor(rng.normal(size=(n, r))), as_tensor(chol))
    return LayerCase(layer, post, rng.normal(size=n), a_cov)


def _layer_numpy(layer):
    v, u, s = (t.detach().numpy() for t in layer.unit_obs())
    return v, u, s, layer.lengthscale.detach().numpy(), layer.noise_std.detach().numpy()


def _psd_sqrt(cov):
    w, q = np.linalg.eigh(0.5 * (cov + cov.T))
    return q * np.sqrt(np.clip(w, 0.0, None))


def mc_layer_moments(layer, a_mean, a_cov, n_draws=DEFAULT_DRAWS, seed=0, posterior=None):
    """Sample activations, targets (variational case) and outputs of one layer.

    Each draw takes A ~ N(a_mean, a_cov); in the variational case also U ~
    Q(U) with zero observation variance.  The output of unit n is drawn
    from its exact conditional normal given A (and U).  Returns reports for
    the per-unit means, variances and pairwise covariances, compared with
    full-covariance analytic propagation.
    """
    rng = np.random.default_rng(seed)
    a_mean, a_cov = np.asarray(a_mean, float), np.asarray(a_cov, float)
    v, u, s, ls, sigma = _layer_numpy(layer)
    n, r = v.shape
    gram = np.exp(-((v[:, :, None] - v[:, None, :]) ** 2) / (2.0 * ls[:, None, None] ** 2))
    if posterior is None:
        reg = gram + np.einsum("nr,rt->nrt", s, np.eye(r))
        kappa = np.linalg.inv(reg)
        beta = np.linalg.solve(reg, u[..., None])[..., 0]
    else:
        kappa = np.linalg.inv(gram)
        mu_u = posterior.mu_u.detach().numpy()
        chol_u = posterior.factor().detach().numpy()
    root = _psd_sqrt(a_cov)

    center = None
    s1 = s2 = s4 = 0.0
    for m in _chunks(n_draws):
        a = a_mean + rng.standard_normal((m, n)) @ root.T
        k = np.exp(-((a[:, :, None] - v) ** 2) / (2.0 * ls[:, None] ** 2))  # (m, n, r)
        if posterior is None:
            mean = np.einsum("mnr,nr->mn", k, beta)
        else:
            targets = mu_u + np.einsum("nrt,mnt->mnr", chol_u, rng.standard_normal((m, n, r)))
            mean = np.einsum("mnr,nrt,mnt->mn", k, kappa, targets)
        var = 1.0 - np.einsum("mnr,nrt,mnt->mn", k, kappa, k) + sigma**2
        f = mean + np.sqrt(np.clip(var, 0.0, None)) * rng.standard_normal((m, n))
        if center is None:
            center = f.mean(0)
        g = f - center
        s1 = s1 + g.sum(0)
        s2 = s2 + g.T @ g
        s4 = s4 + (g**2).T @ (g**2)

    m1 = s1 / n_draws
    mean_est = center + m1
    second = s2 / n_draws
    cov_est = second - np.outer(m1, m1)
    var_se = np.sqrt(np.maximum(s4 / n_draws - second**2, 0.0) / n_draws)
    mean_se = np.sqrt(np.maximum(np.diag(cov_est), 0.0) / n_draws)

    state = nw.MomentState(
        nw.Mode.FULL_COV, as_tensor(a_mean[None]), as_tensor(np.diag(a_cov)[None]), as_tensor(a_cov[None])
    )
    if posterior is None:
        out = nw.propagate_response_ml(state, layer)
    else:
        out = nw.propagate_response_vb(state, layer, posterior)
    cov_an = out.cov[0].detach().numpy()
    iu = np.triu_indices(n, 1)
    return [
        McReport("mean", out.mean[0].detach().numpy(), mean_est, mean_se, n_draws, seed),
        McReport("var", np.diag(cov_an), np.diag(cov_est), np.diag(var_se), n_draws, seed),
        McReport("cov", cov_an[iu], cov_est[iu], var_se[iu], n_draws, seed),
    ]


def layer_oracle_suite(n_cases=20, n_draws=DEFAULT_DRAWS, seed=0, variational=(False, True)):
    """Reports grouped per (case index, variational flag)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_cases):
        case = random_layer_case(rng)
        for vb in variational:
            reports = mc_layer_moments(
                case.layer, case.a_mean, case.a_cov, n_draws,
                tr.derive_seed(seed, f"layer{i}{vb}"), case.posterior if vb else None,
            )
            out.append((i, "vb" if vb else "ml", reports))
    return out


# --------------------------------------------------------------------------
# gradient suite


def random_small_network(rng, objective, max_width=6, max_r=8):
    d = int(rng.integers(1, max_width + 1))
    widths = [int(w) for w in rng.integers(1, max_width + 1, size=2)]
    r = int(rng.integers(2, max_r + 1))
    classification = objective.endswith("classification")
    shape = [d] + widths + ([int(rng.integers(2, 5))] if classification else [])
    net = nw.init_network(
        shape, r_count=r, seed=int(rng.integers(2**31)), classifier=classification,
        target_init="prior" if objective.startswith("vb_") else "random",
    )
    return net, shape


def gradient_suite(seed=0, n_samples=5, h=1e-3, tolerance=1e-4, stencil=4,
                   objectives=tr.OBJECTIVES, modes=("mean", "meanvar", "fullcov")):
    """Finite-difference check for every objective and propagation mode."""
    rng = np.random.default_rng(seed)
    rows = []
    for objective in objectives:
        for mode in modes:
            net, shape = random_small_network(rng, objective)
            x = rng.uniform(0.0, 1.0, size=(n_samples, shape[0]))
            if objective.endswith("classification"):
                t = data_mod.one_hot(rng.integers(0, shape[-1], size=n_samples), shape[-1])
            else:
                t = rng.normal(size=(n_samples, shape[-1]))
            config = tr.TrainConfig(objective=objective, mode=mode, seed=seed)
            posterior = None
            if config.variational:
                posterior = nw.init_posterior(net, config.posterior_scale)
                # move the posterior mean off its initial value by a smooth prior draw
                for p, q in zip(posterior.layers, nw.prior_posterior(net).layers):
                    z = as_tensor(rng.normal(size=p.mu_u.shape))
                    p.mu_u = p.mu_u + 0.1 * (q.chol_u @ z[..., None])[..., 0]
            report = tr.finite_diff_check(net, (x, t), config, posterior, h, tolerance, n_train=50,
                                          stencil=stencil)
            rows.append({"objective": objective, "mode": mode, "shape": shape, "report": report})
    return rows


# --------------------------------------------------------------------------
# central limit experiment

GP_GRID = np.linspace(-5.0, 5.0, 201)


def sample_gp_functions(rng, count, grid=GP_GRID, lengthscale=1.0):
    """``count`` draws of a zero-mean SE GP on ``grid``, shape ``(count, len(grid))``."""
    gram = np.exp(-((grid[:, None] - grid[None, :]) ** 2) / (2.0 * lengthscale**2))
    root = _psd_sqrt(gram)
    return rng.standard_normal((count, len(grid))) @ root.T


def _apply(functions, a, grid=GP_GRID):
    # a: (draws, units); functions: (units, grid); linear interpolation, clamped outside
    return np.stack([np.interp(a[:, j], grid, functions[j]) for j in range(a.shape[1])], axis=1)


@dataclass
class CltResult:
    ks: dict
    n_points: dict
    samples: dict = field(repr=False, default_factory=dict)


def clt_experiment(widths, seed=0, n_draws=1000, input_dim=5, x1_std=1.0, x2_noise=0.1):
    """KS distance between layer-3 activations and their best-fit normal, per width.

    For each width ``w`` a network with ``w`` units in layers 1 and 2 and
    one unit in layer 3 is drawn: standard-normal weights, activation
    functions sampled from a unit-lengthscale SE GP.  For a random input
    vector, X1 is normal with mean f1(A1) and std ``x1_std``; ``n_draws``
    samples of X1 are propagated through layer 2 (outputs f2(A2) plus
    ``x2_noise`` Gaussian noise) and weighted into A3.
    """
    if len(widths) < 2:
        raise ValueError("need at least two widths to compare")
    ks, counts, samples = {}, {}, {}
    for w in widths:
        rng = np.random.default_rng([seed, w])
        x = rng.standard_normal(input_dim)
        w1 = rng.standard_normal((input_dim, w))
        w2 = rng.standard_normal((w, w))
        w3 = rng.standard_normal((w, 1))
        f1 = sample_gp_functions(rng, w)
        f2 = sample_gp_functions(rng, w)
        a1 = (x @ w1)[None, :]
        x1 = _apply(f1, a1) + x1_std * rng.standard_normal((n_draws, w))
        a2 = x1 @ w2
        x2 = _apply(f2, a2) + x2_noise * rng.standard_normal((n_draws, w))
        a3 = (x2 @ w3)[:, 0]
        sd = a3.std()
        ks[w] = float(stats.kstest(a3, "norm", args=(a3.mean(), sd if sd > 0 else 1.0)).statistic)
        counts[w] = len(a3)
        samples[w] = a3
    return CltResult(ks, counts, samples)


def clt_trials(widths=(3, 10), n_trials=20, seed=0, n_draws=1000):
    return [clt_experiment(widths, tr.derive_seed(seed, f"clt{i}"), n_draws) for i in range(n_trials)]


# --------------------------------------------------------------------------
# activation fitting


def activation_fit_experiment(r_counts=(5, 8), functions=("tanh", "relu", "identity"),
                              interval=(-2.0, 2.0), n_grid=101, lengthscale=1.0, noise=1e-4):
    """Max-abs and RMS error of a GPN fitted to standard activation functions."""
    grid = np.linspace(*interval, n_grid)
    rows = []
    for fn in functions:
        truth = ACTIVATIONS[fn](grid)
        for r in r_counts:
            obs = fit_activation(fn, r, interval, noise)
            mean, _ = sparse_predict(grid, obs, lengthscale, 0.0)
            err = mean.numpy() - truth
            rows.append({
                "function": fn,
                "r_count": r,
                "max_abs": float(np.abs(err).max()),
                "rms": float(np.sqrt(np.mean(err**2))),
            })
    return rows


# --------------------------------------------------------------------------
# activation export


def activation_curves(net, posterior=None, grid=np.linspace(-3.0, 3.0, 121)):
    """Predictive mean and std of every unit's activation function on ``grid``."""
    g = as_tensor(grid)
    curves = []
    for l, layer in enumerate(net.layers):
        n = layer.n_units
        state = nw.MomentState(nw.Mode.MEAN_VAR, g[:, None].expand(len(g), n).contiguous(),
                               torch.zeros(len(g), n, dtype=g.dtype))
        with torch.no_grad():
            if posterior is None:
                out = nw.propagate_response_ml(state, layer)
            else:
                out = nw.propagate_response_vb(state, layer, posterior.layers[l])
        v, u, _ = layer.unit_obs()
        if posterior is not None:
            u = posterior.layers[l].mu_u
        for j in range(n):
            curves.append({
                "layer": l,
                "unit": j,
                "grid": grid,
                "mean": out.mean[:, j].numpy(),
                "std": torch.sqrt(out.var[:, j]).numpy(),
                "inducing": v[j].detach().numpy(),
                "targets": u[j].detach().numpy(),
            })
    return curves


def export_activations(net, out_dir, posterior=None, grid=np.linspace(-3.0, 3.0, 121)):
    """One CSV per unit with columns grid, mean, std, inducing, target."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for c in activation_curves(net, posterior, grid):
        path = os.path.join(out_dir, f"act_l{c['layer']}_u{c['unit']}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid", "mean", "std", "inducing", "target"])
            for i in range(max(len(c["grid"]), len(c["inducing"]))):
                row = [repr(float(c[k][i])) if i < len(c[k]) else "" for k in ("grid", "mean", "std")]
                row += [repr(float(c[k][i])) if i < len(c[k]) else "" for k in ("inducing", "targets")]
                w.writerow(row)
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# benchmarks

VARIANTS = {
    "mean_only": {"mode": "mean"},
    "mean_variance": {"mode": "meanvar"},
    "mean_variance_identity": {"mode": "meanvar", "target_init": "identity"},
    "mean_variance_layer": {"mode": "meanvar", "sharing": "layer"},
    "full_covariance": {"mode": "fullcov"},
    # GPN held at a tanh fit; not the paper's fixed-tanh network
    "frozen_tanh_gpn": {"mode": "meanvar", "target_init": "tanh", "freeze_targets": True},
    "vb_mean_variance": {"mode": "meanvar", "objective": "vb_classification"},
}


def parse_arch(text):
    """``"16x30x15x26"`` -> [16, 30, 15, 26]."""
    parts = str(text).lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise ValueError(f"malformed architecture {text!r}") from None
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"architecture {text!r} needs at least two positive sizes")
    return dims


def build_network(arch, variant, seed, r_count=14, classifier=True):
    opts = VARIANTS[variant]
    net = nw.init_network(
        arch, r_count=r_count, seed=seed, classifier=classifier,
        target_init=opts.get("target_init", "random"), sharing=opts.get("sharing", "none"),
        obs_var=1e-2 if opts.get("freeze_targets") else np.sqrt(0.1),
    )
    if opts.get("freeze_targets"):
        for layer in net.layers:
            layer.freeze_targets = True
    return net


def error_rate(net, posterior, x, t, mode):
    if len(x) == 0:
        return float("nan")
    with torch.no_grad():
        final = nw.forward(net, as_tensor(x), mode, posterior)
        logits = final.mean @ net.out_weights
    return float((logits.argmax(-1).numpy() != np.asarray(t).argmax(-1)).mean())


def peak_memory_mb():
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def benchmark_run(dataset_name, arch, variant="mean_variance", seeds=5, root=None, dataset=None,
                  config_overrides=None, base_seed=0, export_dir=None):
    """Train one variant on a benchmark for several seeds; one result row per seed.

    With ``export_dir`` the learned activation functions of every run are
    written below it.  Raises DatasetMissing when the dataset files are not
    available locally.
    """
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    ds = dataset if dataset is not None else data_mod.load_benchmark(dataset_name, root)
    arch = parse_arch(arch) if isinstance(arch, str) else list(arch)
    opts = VARIANTS[variant]
    n_seeds = seeds if isinstance(seeds, int) else len(seeds)
    seed_list = range(base_seed, base_seed + n_seeds) if isinstance(seeds, int) else seeds
    rows = []
    for seed in seed_list:
        split = data_mod.split(ds, 0.10, tr.derive_seed(seed, "split"))
        net = build_network(arch, variant, tr.derive_seed(seed, "init"))
        cfg = tr.TrainConfig(
            seed=seed, mode=opts["mode"], objective=opts.get("objective", "ml_classification"),
            **(config_overrides or {}),
        )
        start = time.perf_counter()
        res = tr.train(net, split, cfg)
        elapsed = time.perf_counter() - start
        iters = res.iterations
        if export_dir is not None:
            export_activations(res.net, os.path.join(export_dir, f"{variant}_seed{seed}"), res.posterior)
        errs = {k: error_rate(res.net, res.posterior, *split.subset(k), cfg.mode) for k in ("train", "val", "test")}
        rows.append({
            "dataset": dataset_name,
            "arch": "x".join(str(a) for a in arch),
            "variant": variant,
            "seed": seed,
            "train_error": errs["train"],
            "val_error": errs["val"],
            "test_error": errs["test"],
            "iterations": iters,
            "ms_per_iter": 1000.0 * elapsed / max(iters, 1),
            "peak_mem_mb": peak_memory_mb(),
        })
    return rows


def summarize(rows, key="test_error"):
    vals = np.array([r[key] for r in rows], dtype=float)
    se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
    return float(vals.mean()), float(se)


def mode_runtime(width=50, r_count=14, batch=20, input_dim=20, n_classes=10, repeats=5, seed=0,
                 modes=("mean", "meanvar", "fullcov")):
    """Best-of-``repeats`` wall time (ms) of one loss+gradient evaluation per mode."""
    net = nw.init_network([input_dim, width, width, n_classes], r_count=r_count, seed=seed,
                          classifier=True)
    rng = np.random.default_rng(seed)
    x = as_tensor(rng.uniform(size=(batch, input_dim)))
    t = as_tensor(data_mod.one_hot(rng.integers(0, n_classes, size=batch), n_classes))
    flat, layout = nw.flatten(net)
    out = {}
    for mode in modes:
        cfg = tr.TrainConfig(mode=mode, objective="ml_classification")
        f = tr.make_objective(net, None, layout, cfg, batch)
        times = []
        for _ in range(repeats + 1):
            start = time.perf_counter()
            tr.value_and_grad(lambda p: f(p, x, t), flat)
            times.append(1000.0 * (time.perf_counter() - start))
        out[mode] = min(times[1:])
    return out


def unscented_mc_case(rng, n_draws=DEFAULT_DRAWS, seed=0, n_classes=3):
    """Unscented expected log-softmax vs sampling, for one random 3-class case.

    Mean logits ~ N(0, 1); covariance A A^T with A entries ~ N(0, 0.25^2);
    the head is the identity so the sigma points live in logit space.
    """
    mean = rng.normal(size=n_classes)
    a = rng.normal(0.0, 0.25, size=(n_classes, n_classes))
    cov = a @ a.T
    label = int(rng.integers(n_classes))
    final = nw.MomentState(nw.Mode.FULL_COV, as_tensor(mean[None]), as_tensor(np.diag(cov)[None]),
                           as_tensor(cov[None]))
    onehot = data_mod.one_hot([label], n_classes)
    analytic = float(obj.expected_log_softmax(final, torch.eye(n_classes, dtype=torch.float64),
                                              as_tensor(onehot))[0])
    draw_rng = np.random.default_rng(seed)
    root = _psd_sqrt(cov)
    s1 = s2 = 0.0
    for m in _chunks(n_draws):
        z = mean + draw_rng.standard_normal((m, n_classes)) @ root.T
        ll = z[:, label] - np.logaddexp.reduce(z, axis=1)
        s1 += ll.sum()
        s2 += (ll**2).sum()
    est, se = _mean_stderr(s1, s2, n_draws)
    return McReport("expected_log_softmax", analytic, est, se, n_draws, seed)
