"""GPN layers and networks with analytic moment propagation.

A layer maps the moments of its inputs ``X^{l-1}`` to the moments of its
outputs ``X^l`` in two steps: the linear projection to activations, then the
GP response given the virtual observations of each unit.  Three fidelities
are supported (see :class:`Mode`); the response step comes in a
maximum-likelihood flavour (point-estimate targets ``U`` with variances
``S``) and a variational flavour (a Gaussian posterior over ``U``).
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from . import kernels
from .errors import BadShape, DimensionMismatch, NegativeVariance
from .gp import ACTIVATIONS
from .linalg import DTYPE, as_tensor, chol_inverse, chol_solve, jittered_cholesky

logger = logging.getLogger(__name__)

VAR_WARN = -1e-8
VAR_FAIL = -1e-4

CHECKPOINT_VERSION = 1
_RHO_MAX = 700.0  # beyond this psi_r psi_t underflows anyway


class Mode(str, Enum):
    MEAN = "mean"
    MEAN_VAR = "meanvar"
    FULL_COV = "fullcov"


def softplus(x):
    return torch.nn.functional.softplus(as_tensor(x))


def inverse_softplus(y):
    y = as_tensor(y)
    return torch.where(y > 30.0, y, torch.log(torch.expm1(y)))


@dataclass
class MomentState:
    """Per-sample moments of a layer's activations or outputs.

    ``mean`` and ``var`` are ``(S, N)``; ``cov`` is ``(S, N, N)`` and only
    present in FULL_COV mode, where ``var`` is its diagonal.
    """

    mode: Mode
    mean: torch.Tensor
    var: torch.Tensor | None = None
    cov: torch.Tensor | None = None

    @property
    def n_samples(self):
        return self.mean.shape[0]

    @property
    def width(self):
        return self.mean.shape[1]

    @classmethod
    def deterministic(cls, mean, mode):
        mean = as_tensor(mean)
        mode = Mode(mode)
        if mode is Mode.MEAN:
            return cls(mode, mean)
        var = torch.zeros_like(mean)
        if mode is Mode.MEAN_VAR:
            return cls(mode, mean, var)
        return cls(mode, mean, var, torch.zeros(mean.shape + mean.shape[-1:], dtype=DTYPE))


@dataclass
class LayerParams:
    """Trainable quantities of one GPN layer.

    Virtual observations are stored unit-major with shape ``(K, R)`` where
    ``K`` is the unit count, or 1 when ``sharing == "layer"``.  Lengthscales,
    noise std-devs and observation variances are stored as unconstrained
    reals mapped through softplus.
    """

    weights: torch.Tensor  # (N_prev, N)
    raw_lengthscale: torch.Tensor  # (N,)
    raw_noise: torch.Tensor  # (N,)
    inducing: torch.Tensor  # (K, R)
    targets: torch.Tensor  # (K, R)
    raw_obs_var: torch.Tensor  # (K, R)
    sharing: str = "none"
    freeze_v: bool = True
    freeze_targets: bool = False  # keeps the activation function fixed

    @property
    def n_in(self):
        return self.weights.shape[0]

    @property
    def n_units(self):
        return self.weights.shape[1]

    @property
    def r_count(self):
        return self.inducing.shape[-1]

    @property
    def lengthscale(self):
        return softplus(self.raw_lengthscale)

    @property
    def noise_std(self):
        return softplus(self.raw_noise)

    @property
    def obs_var(self):
        return softplus(self.raw_obs_var)

    def unit_obs(self):
        """(V, U, S) expanded to one row per unit."""
        shape = (self.n_units, self.r_count)
        return (
            self.inducing.expand(shape),
            self.targets.expand(shape),
            self.obs_var.expand(shape),
        )


@dataclass
class LayerPosterior:
    """Gaussian posterior N(mu_u, chol_u chol_u^T) over each unit's targets."""

    mu_u: torch.Tensor  # (N, R)
    chol_u: torch.Tensor  # (N, R, R), only the lower triangle is used
    diagonal: bool = False

    def factor(self):
        if self.diagonal:
            return torch.diag_embed(torch.diagonal(self.chol_u, dim1=-2, dim2=-1))
        return torch.tril(self.chol_u)

    @property
    def sigma_u(self):
        f = self.factor()
        return f @ f.transpose(-1, -2)


@dataclass
class VariationalPosterior:
    layers: list[LayerPosterior]


@dataclass
class NetworkParams:
    layers: list[LayerParams]
    out_weights: torch.Tensor | None = None  # (N_L, C) classification head
    seed: int | None = None

    def __post_init__(self):
        if not self.layers:
            raise BadShape("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_units != nxt.n_in:
                raise BadShape(f"layer widths {prev.n_units} and {nxt.n_in} do not connect")
        if self.out_weights is not None and self.out_weights.shape[0] != self.layers[-1].n_units:
            raise BadShape("classification head does not match the last layer")

    @property
    def shape(self):
        dims = [self.layers[0].n_in] + [layer.n_units for layer in self.layers]
        if self.out_weights is not None:
            dims.append(self.out_weights.shape[1])
        return dims


# --------------------------------------------------------------------------
# propagation


def propagate_activation(x_state, w):
    """Moments of ``A = X W`` given the moments of ``X``."""
    w = as_tensor(w)
    if x_state.width != w.shape[0]:
        raise DimensionMismatch(f"state width {x_state.width} but weights have {w.shape[0]} rows")
    mean = x_state.mean @ w
    if x_state.mode is Mode.MEAN:
        return MomentState(Mode.MEAN, mean)
    if x_state.mode is Mode.MEAN_VAR:
        return MomentState(Mode.MEAN_VAR, mean, x_state.var @ (w * w))
    cov = torch.einsum("ij,sik,kl->sjl", w, x_state.cov, w)
    cov = 0.5 * (cov + cov.transpose(-1, -2))
    return MomentState(Mode.FULL_COV, mean, torch.diagonal(cov, dim1=-2, dim2=-1), cov)


def _checked_variance(var):
    low = float(var.detach().min()) if var.numel() else 0.0
    if low < VAR_FAIL:
        raise NegativeVariance(f"propagated variance {low:.3e} is negative")
    if low < VAR_WARN:
        logger.warning("clamping negative propagated variance %.3e to zero", low)
    return var.clamp_min(0.0)


def _pair_indices(n):
    return torch.triu_indices(n, n, offset=1)


def _response_moments(a_state, v, ls, noise_std, kmat, beta):
    """Output moments given activation moments.

    ``kmat`` is the matrix sandwiched between kernel rows in the conditional
    variance (the regularized inverse Gram matrix in ML mode, ``K^-1 -
    K^-1 Sigma_u K^-1`` in variational mode); ``beta`` are the dual weights
    such that the conditional mean is ``k(a, V) . beta``.
    """
    mu = a_state.mean
    if a_state.mode is Mode.MEAN:
        alpha = kernels.se_kernel(mu[..., None], v, ls[:, None])
        return MomentState(Mode.MEAN, (alpha * beta).sum(-1))

    var_a = a_state.var
    ps = kernels.psi(mu, var_a, v, ls)
    mean = (ps * beta).sum(-1)
    inner = kmat - beta[:, :, None] * beta[:, None, :]
    if kernels.any_flipped():
        return _response_moments_direct(a_state, v, ls, noise_std, kmat, beta, ps, mean, inner)

    # Omega = psi psi^T exp(rho) with rho proportional to var_a, hence
    # var = 1 - psi^T kappa psi - psi^T [(kappa - beta beta^T) o expm1(rho)] psi + sigma^2,
    # which avoids subtracting the large terms beta^T Omega beta and mean^2.
    rho = kernels.omega_log_ratio(mu, var_a, v, ls).clamp_max(_RHO_MAX)
    spread = ((inner * torch.expm1(rho)) @ ps[..., None])[..., 0]
    var = 1.0 - (ps * ((kmat @ ps[..., None])[..., 0] + spread)).sum(-1) + noise_std**2
    var = _checked_variance(var)
    if a_state.mode is Mode.MEAN_VAR:
        return MomentState(Mode.MEAN_VAR, mean, var)

    n = a_state.width
    cov = torch.diag_embed(var)
    if n > 1:
        i, j = _pair_indices(n)
        rho = kernels.cross_log_ratio(
            mu[:, i], mu[:, j], var_a[:, i], var_a[:, j], a_state.cov[:, i, j],
            v[i], v[j], ls[i], ls[j],
        ).clamp_max(_RHO_MAX)
        b = ps * beta
        off = ((torch.expm1(rho) @ b[:, j, :, None])[..., 0] * b[:, i]).sum(-1)
        upper = torch.zeros_like(cov)
        upper[:, i, j] = off
        cov = cov + upper + upper.transpose(-1, -2)
    return MomentState(Mode.FULL_COV, mean, var, cov)


def _response_moments_direct(a_state, v, ls, noise_std, kmat, beta, ps, mean, inner):
    """Textbook form through psi, omega and lambda; used when a debug sign flip is active."""
    mu, var_a = a_state.mean, a_state.var
    om = kernels.omega(mu, var_a, v, ls)
    var = 1.0 - (inner * om).sum((-1, -2)) - mean**2 + noise_std**2
    var = _checked_variance(var)
    if a_state.mode is Mode.MEAN_VAR:
        return MomentState(Mode.MEAN_VAR, mean, var)
    n = a_state.width
    cov = torch.diag_embed(var)
    if n > 1:
        i, j = _pair_indices(n)
        lam = kernels.cross_expectation(
            mu[:, i], mu[:, j], var_a[:, i], var_a[:, j], a_state.cov[:, i, j],
            v[i], v[j], ls[i], ls[j],
        )
        second = torch.einsum("sprt,pr,pt->sp", lam, beta[i], beta[j])
        off = second - mean[:, i] * mean[:, j]
        upper = torch.zeros_like(cov)
        upper[:, i, j] = off
        cov = cov + upper + upper.transpose(-1, -2)
    return MomentState(Mode.FULL_COV, mean, var, cov)


def ml_kernel_terms(layer):
    """Regularized inverse Gram matrices and dual weights of every unit."""
    v, u, s = layer.unit_obs()
    ls = layer.lengthscale
    gram = kernels.kernel_matrix(v, v, ls) + torch.diag_embed(s)
    L, _ = jittered_cholesky(gram)
    return chol_inverse(L), chol_solve(L, u)


def propagate_response_ml(a_state, layer):
    if a_state.width != layer.n_units:
        raise DimensionMismatch(f"state width {a_state.width} but layer has {layer.n_units} units")
    kappa, beta = ml_kernel_terms(layer)
    v, _, _ = layer.unit_obs()
    return _response_moments(a_state, v, layer.lengthscale, layer.noise_std, kappa, beta)


def vb_kernel_terms(layer, post):
    v, _, _ = layer.unit_obs()
    ls = layer.lengthscale
    L, _ = jittered_cholesky(kernels.kernel_matrix(v, v, ls))
    k_inv = chol_inverse(L)
    beta = chol_solve(L, post.mu_u)
    k_hat = k_inv - k_inv @ post.sigma_u @ k_inv
    return k_hat, beta


def propagate_response_vb(a_state, layer, post):
    """Output moments with targets integrated over their variational posterior.

    The virtual observation variances of ``layer`` are ignored (taken as 0).
    """
    if a_state.width != layer.n_units:
        raise DimensionMismatch(f"state width {a_state.width} but layer has {layer.n_units} units")
    if layer.sharing != "none":
        raise ValueError("variational propagation requires per-unit observations")
    if post.mu_u.shape != (layer.n_units, layer.r_count):
        raise DimensionMismatch("posterior does not match the layer shape")
    k_hat, beta = vb_kernel_terms(layer, post)
    v, _, _ = layer.unit_obs()
    return _response_moments(a_state, v, layer.lengthscale, layer.noise_std, k_hat, beta)


def forward(net, inputs, mode=Mode.MEAN_VAR, posterior=None):
    """Propagate deterministic inputs through every layer; returns the last state."""
    x = as_tensor(inputs)
    mode = Mode(mode)
    if x.shape[-1] != net.layers[0].n_in:
        raise DimensionMismatch(f"inputs have width {x.shape[-1]}, network expects {net.layers[0].n_in}")
    state = MomentState.deterministic(x, mode)
    for idx, layer in enumerate(net.layers):
        a_state = propagate_activation(state, layer.weights)
        if posterior is None:
            state = propagate_response_ml(a_state, layer)
        else:
            state = propagate_response_vb(a_state, layer, posterior.layers[idx])
    return state


# --------------------------------------------------------------------------
# construction


def glorot_bound(n_prev, n_next):
    return float(np.sqrt(6.0) / np.sqrt(n_prev + n_next))


def init_network(
    shape,
    r_count=14,
    v_range=(-2.0, 2.0),
    target_init="random",
    seed=0,
    sharing="none",
    classifier=False,
    freeze_v=True,
    obs_var=np.sqrt(0.1),
    lengthscale=1.0,
    noise_std=0.1,
):
    """Build a network from layer sizes.

    ``shape`` lists the input width followed by the GPN layer widths; with
    ``classifier=True`` the final entry is instead the class count of a
    linear softmax head.  Weights of layer ``l`` are drawn uniformly from
    ``[-r, r]`` with ``r = sqrt(6) / sqrt(N_{l-1} + N_{l+1})``; where
    ``N_{l+1}`` does not exist the layer's own width is used.
    """
    shape = [int(n) for n in shape]
    if len(shape) < 2 or (classifier and len(shape) < 3) or min(shape) < 1:
        raise BadShape(f"invalid network shape {shape}")
    if sharing not in ("none", "layer"):
        raise ValueError(f"unknown sharing mode {sharing!r}")
    rng = np.random.default_rng(seed)
    gpn_sizes = shape[:-1] if classifier else shape
    v = np.linspace(v_range[0], v_range[1], r_count)

    layers = []
    for l in range(1, len(gpn_sizes)):
        n_prev, n = gpn_sizes[l - 1], gpn_sizes[l]
        n_next = shape[l + 1] if l + 1 < len(shape) else n
        bound = glorot_bound(n_prev, n_next)
        w = rng.uniform(-bound, bound, size=(n_prev, n))
        k = 1 if sharing == "layer" else n
        if target_init == "random":
            u = rng.standard_normal((k, r_count))
        elif target_init == "identity":
            u = np.tile(v, (k, 1))
        elif target_init == "prior":
            # smooth draws from N(0, K(V, V)); a good start for variational training
            gram = np.exp(-((v[:, None] - v[None, :]) ** 2) / (2.0 * lengthscale**2))
            w_, q_ = np.linalg.eigh(gram)
            u = rng.standard_normal((k, r_count)) @ (q_ * np.sqrt(np.clip(w_, 0.0, None))).T
        elif target_init in ACTIVATIONS:
            u = np.tile(ACTIVATIONS[target_init](v), (k, 1))
        else:
            raise ValueError(f"unknown target_init {target_init!r}")
        layers.append(
            LayerParams(
                weights=as_tensor(w),
                raw_lengthscale=inverse_softplus(torch.full((n,), lengthscale, dtype=DTYPE)),
                raw_noise=inverse_softplus(torch.full((n,), noise_std, dtype=DTYPE)),
                inducing=as_tensor(np.tile(v, (k, 1))),
                targets=as_tensor(u),
                raw_obs_var=inverse_softplus(torch.full((k, r_count), float(obs_var), dtype=DTYPE)),
                sharing=sharing,
                freeze_v=freeze_v,
            )
        )
    out_w = None
    if classifier:
        n_last, n_cls = shape[-2], shape[-1]
        bound = glorot_bound(n_last, n_cls)
        out_w = as_tensor(rng.uniform(-bound, bound, size=(n_last, n_cls)))
    return NetworkParams(layers, out_w, seed)


def prior_posterior(net):
    """Variational posterior equal to the GP prior on every unit's targets."""
    out = []
    for layer in net.layers:
        v, _, _ = layer.unit_obs()
        gram = kernels.kernel_matrix(v, v, layer.lengthscale.detach())
        L, _ = jittered_cholesky(gram)
        out.append(LayerPosterior(torch.zeros(v.shape, dtype=DTYPE), L.detach().clone()))
    return VariationalPosterior(out)


def init_posterior(net, scale=0.1, diagonal=False):
    """Posterior centred on the current targets with covariance ``scale^2 K``."""
    prior = prior_posterior(net)
    out = []
    for layer, p in zip(net.layers, prior.layers):
        _, u, _ = layer.unit_obs()
        out.append(LayerPosterior(u.detach().clone(), scale * p.chol_u, diagonal))
    return VariationalPosterior(out)


# --------------------------------------------------------------------------
# flat parameter vectors


@dataclass
class ParamLayout:
    """Where each trainable tensor lives inside a flat parameter vector."""

    entries: list = field(default_factory=list)  # (path, shape)

    @property
    def size(self):
        return sum(int(np.prod(shape)) for _, shape in self.entries)

    def names(self):
        out = []
        for path, shape in self.entries:
            stem = ".".join(str(p) for p in path)
            out.extend(f"{stem}[{i}]" for i in range(int(np.prod(shape))))
        return out


def _layer_fields(layer, variational):
    names = ["weights", "raw_lengthscale", "raw_noise"]
    if not variational and not layer.freeze_targets:
        names += ["targets", "raw_obs_var"]
    if not layer.freeze_v:
        names.append("inducing")
    return names


def _trainable(net, posterior):
    items = []
    for i, layer in enumerate(net.layers):
        for name in _layer_fields(layer, posterior is not None):
            items.append((("layers", i, name), getattr(layer, name)))
    if net.out_weights is not None:
        items.append((("out_weights",), net.out_weights))
    if posterior is not None:
        for i, p in enumerate(posterior.layers):
            items.append((("posterior", i, "mu_u"), p.mu_u))
            items.append((("posterior", i, "chol_u"), p.chol_u))
    return items


def flatten(net, posterior=None):
    """Concatenate every trainable tensor into one vector.

    Frozen inducing points are not trainable and do not appear.  In
    variational mode the point-estimate targets and their variances are
    replaced by the posterior parameters.
    """
    items = _trainable(net, posterior)
    layout = ParamLayout([(path, tuple(t.shape)) for path, t in items])
    flat = torch.cat([t.detach().reshape(-1) for _, t in items]) if items else torch.zeros(0)
    return flat.to(DTYPE).clone(), layout


def unflatten(flat, layout, net, posterior=None):
    """Rebuild ``(net, posterior)`` with trainable tensors taken from ``flat``.

    The new tensors are views of ``flat`` so gradients flow back into it.
    """
    layers = [dict() for _ in net.layers]
    post = [dict() for _ in (posterior.layers if posterior is not None else [])]
    out_w = net.out_weights
    offset = 0
    for path, shape in layout.entries:
        size = int(np.prod(shape))
        value = flat[offset : offset + size].reshape(shape)
        offset += size
        if path[0] == "layers":
            layers[path[1]][path[2]] = value
        elif path[0] == "posterior":
            post[path[1]][path[2]] = value
        else:
            out_w = value
    new_net = NetworkParams(
        [dataclasses.replace(layer, **upd) for layer, upd in zip(net.layers, layers)],
        out_w,
        net.seed,
    )
    new_post = None
    if posterior is not None:
        new_post = VariationalPosterior(
            [dataclasses.replace(p, **upd) for p, upd in zip(posterior.layers, post)]
        )
    return new_net, new_post


# --------------------------------------------------------------------------
# checkpoints

_LAYER_ARRAYS = ("weights", "raw_lengthscale", "raw_noise", "inducing", "targets", "raw_obs_var")


def save_checkpoint(path, net, posterior=None, meta=None):
    """Write parameters to a ``.npz`` container with a JSON header."""
    arrays = {}
    header = {
        "version": CHECKPOINT_VERSION,
        "shape": net.shape,
        "seed": net.seed,
        "classifier": net.out_weights is not None,
        "layers": [
            {"sharing": l.sharing, "freeze_v": l.freeze_v, "freeze_targets": l.freeze_targets}
            for l in net.layers
        ],
        "posterior": None,
        "meta": meta or {},
    }
    for i, layer in enumerate(net.layers):
        for name in _LAYER_ARRAYS:
            arrays[f"layer{i}.{name}"] = getattr(layer, name).detach().numpy()
    if net.out_weights is not None:
        arrays["out_weights"] = net.out_weights.detach().numpy()
    if posterior is not None:
        header["posterior"] = [{"diagonal": p.diagonal} for p in posterior.layers]
        for i, p in enumerate(posterior.layers):
            arrays[f"posterior{i}.mu_u"] = p.mu_u.detach().numpy()
            arrays[f"posterior{i}.chol_u"] = p.chol_u.detach().numpy()
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(net, posterior, meta)``."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        layers = []
        for i, flags in enumerate(header["layers"]):
            tensors = {name: torch.from_numpy(data[f"layer{i}.{name}"].copy()) for name in _LAYER_ARRAYS}
            layers.append(LayerParams(**tensors, **flags))
        out_w = torch.from_numpy(data["out_weights"].copy()) if header["classifier"] else None
        posterior = None
        if header["posterior"] is not None:
            posterior = VariationalPosterior(
                [
                    LayerPosterior(
                        torch.from_numpy(data[f"posterior{i}.mu_u"].copy()),
                        torch.from_numpy(data[f"posterior{i}.chol_u"].copy()),
                        flags["diagonal"],
                    )
                    for i, flags in enumerate(header["posterior"])
                ]
            )
    return NetworkParams(layers, out_w, header["seed"]), posterior, header["meta"]
