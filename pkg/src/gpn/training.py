"""Gradients, Adam, plateau learning-rate schedule and gradient checking."""

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import network as nw
from . import objectives as obj
from .errors import NonFiniteGradient
from .linalg import DTYPE, as_tensor

logger = logging.getLogger(__name__)

OBJECTIVES = ("ml_regression", "ml_classification", "vb_regression", "vb_classification")

HISTORY_COLUMNS = ("iteration", "lr", "train_loss", "val_loss", "val_error", "wall_ms")


def derive_seed(seed, name):
    """Stable sub-seed for a named subsystem."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFF


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    lr_decay: float = 10.0
    lr_min: float = 1e-6
    patience: int = 10
    min_rel_improvement: float = 1e-3
    batch_size: int = 200
    max_iters: int = 200_000
    seed: int = 0
    mode: str = "meanvar"
    objective: str = "ml_classification"
    penalty: tuple | None = (0.1, 1e-3)
    kappa_u: float | None = None
    eval_every: int | None = None  # iterations; None evaluates once per epoch
    posterior_scale: float = 0.1

    def __post_init__(self):
        if not self.lr0 > self.lr_min > 0:
            raise ValueError("require lr0 > lr_min > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        nw.Mode(self.mode)

    @property
    def variational(self):
        return self.objective.startswith("vb_")

    @property
    def classification(self):
        return self.objective.endswith("classification")


@dataclass
class OptimizerState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls(torch.zeros_like(params), torch.zeros_like(params))


def grad(objective, params):
    """Gradient of ``objective(params)`` with respect to the flat vector ``params``.

    Raises NonFiniteGradient if any component is NaN or infinite.
    """
    p = as_tensor(params).detach().clone().requires_grad_(True)
    loss = objective(p)
    (g,) = torch.autograd.grad(loss, p, allow_unused=True)
    if g is None:
        g = torch.zeros_like(p)
    if not bool(torch.isfinite(g).all()):
        raise NonFiniteGradient("gradient has non-finite components")
    return g


def value_and_grad(objective, params):
    p = as_tensor(params).detach().clone().requires_grad_(True)
    loss = objective(p)
    (g,) = torch.autograd.grad(loss, p, allow_unused=True)
    if g is None:
        g = torch.zeros_like(p)
    return loss.detach(), g


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new = params - lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return new, OptimizerState(m, v, step, state.beta1, state.beta2, state.eps)


# --------------------------------------------------------------------------
# objectives over flat parameter vectors


def data_loss(net, posterior, x, t, config):
    """Per-sample data term of the configured objective."""
    final = nw.forward(net, x, config.mode, posterior)
    if config.classification:
        return obj.classification_loss(final, net.out_weights, t, config.kappa_u)
    sigma = net.layers[-1].noise_std
    return obj.regression_nll(final, t, sigma) / x.shape[0]


def batch_objective(net, posterior, x, t, config, n_train):
    """Mini-batch estimate of the full objective, normalized per training sample."""
    loss = data_loss(net, posterior, x, t, config)
    if config.variational:
        loss = loss + obj.elbo_reg_term(net, posterior) / n_train
    elif config.penalty is not None:
        alpha, beta = config.penalty
        loss = loss + obj.s_penalty(net, alpha, beta)
    return loss


def make_objective(net, posterior, layout, config, n_train):
    """Closure ``f(flat, x, t)`` evaluating the batch objective at ``flat``."""

    def f(flat, x, t):
        net_, post_ = nw.unflatten(flat, layout, net, posterior)
        return batch_objective(net_, post_, x, t, config, n_train)

    return f


def predict_error(net, posterior, x, t, config):
    """Misclassification rate, or RMSE of the predicted mean for regression."""
    final = nw.forward(net, x, config.mode, posterior)
    if config.classification:
        logits = final.mean @ net.out_weights
        return float((logits.argmax(-1) != t.argmax(-1)).double().mean())
    return float(torch.sqrt(((final.mean - t) ** 2).mean()))


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    net: nw.NetworkParams
    posterior: nw.VariationalPosterior | None
    history: list = field(default_factory=list)
    best_iteration: int = 0
    best_val_loss: float = float("inf")
    stop_reason: str = ""
    iterations: int = 0


def _split_tensors(data, name):
    x, t = data.subset(name)
    return as_tensor(x), as_tensor(t)


def train(net, data, config, posterior=None):
    """Mini-batch Adam with plateau learning-rate decay and best-checkpoint tracking.

    The validation loss is evaluated once per epoch (or every
    ``config.eval_every`` iterations).  After ``config.patience`` evaluations
    without a relative improvement of ``config.min_rel_improvement`` the
    learning rate is divided by ``config.lr_decay``; once it has reached
    ``config.lr_min`` a further plateau terminates training.  The returned
    parameters are those with the lowest validation loss.
    """
    torch.manual_seed(derive_seed(config.seed, "torch"))
    rng = np.random.default_rng(derive_seed(config.seed, "batches"))
    if config.variational and posterior is None:
        posterior = nw.init_posterior(net, config.posterior_scale)
    if not config.variational:
        posterior = None

    x_tr, t_tr = _split_tensors(data, "train")
    x_va, t_va = _split_tensors(data, "val")
    n_train = x_tr.shape[0]
    if n_train == 0:
        raise ValueError("training split is empty")
    use_val = x_va.shape[0] > 0
    x_ev, t_ev = (x_va, t_va) if use_val else (x_tr, t_tr)

    flat, layout = nw.flatten(net, posterior)
    f = make_objective(net, posterior, layout, config, n_train)
    state = OptimizerState.zeros_like(flat)
    lr = config.lr0
    best_flat = flat.clone()
    best_val = float("inf")
    plateau_ref = float("inf")
    bad_evals = 0
    iteration = 0
    running = []
    result = TrainResult(net, posterior)
    start = time.perf_counter()
    batch = min(config.batch_size, n_train)

    def evaluate():
        with torch.no_grad():
            net_, post_ = nw.unflatten(flat, layout, net, posterior)
            val = float(data_loss(net_, post_, x_ev, t_ev, config))
            err = predict_error(net_, post_, x_ev, t_ev, config)
        return val, err

    stop = ""
    while not stop:
        perm = rng.permutation(n_train)
        for lo in range(0, n_train - batch + 1, batch):
            idx = torch.from_numpy(perm[lo : lo + batch])
            loss, g = value_and_grad(lambda p: f(p, x_tr[idx], t_tr[idx]), flat)
            if not (torch.isfinite(g).all() and torch.isfinite(loss)):
                best_net, best_post = nw.unflatten(best_flat, layout, net, posterior)
                raise NonFiniteGradient(
                    f"non-finite loss or gradient at iteration {iteration}",
                    checkpoint=(best_net, best_post),
                )
            flat, state = adam_step(state, flat, g, lr)
            iteration += 1
            running.append(float(loss))
            epoch_end = lo + 2 * batch > n_train
            due = iteration % config.eval_every == 0 if config.eval_every else epoch_end
            if due:
                val, err = evaluate()
                result.history.append(
                    {
                        "iteration": iteration,
                        "lr": lr,
                        "train_loss": float(np.mean(running)),
                        "val_loss": val,
                        "val_error": err,
                        "wall_ms": 1000.0 * (time.perf_counter() - start),
                    }
                )
                running = []
                if not np.isfinite(val):
                    stop = "non_finite_validation"
                    break
                if val < best_val:
                    best_val, best_flat = val, flat.clone()
                    result.best_iteration = iteration
                if not np.isfinite(plateau_ref) or (
                    val < plateau_ref - config.min_rel_improvement * abs(plateau_ref)
                ):
                    plateau_ref = val
                    bad_evals = 0
                else:
                    bad_evals += 1
                if bad_evals >= config.patience:
                    if lr / config.lr_decay < config.lr_min * (1.0 - 1e-9):
                        stop = "lr_schedule"
                        break
                    lr /= config.lr_decay
                    bad_evals = 0
                    logger.info("iteration %d: learning rate decreased to %.1e", iteration, lr)
            if iteration >= config.max_iters:
                stop = "max_iters"
                break

    result.net, result.posterior = nw.unflatten(best_flat.detach(), layout, net, posterior)
    result.best_val_loss = best_val
    result.stop_reason = stop
    result.iterations = iteration
    return result


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class FiniteDiffReport:
    worst_rel_error: float
    n_checked: int
    n_skipped: int
    failing: list  # (name, analytic, numeric, rel_error)
    tolerance: float

    @property
    def passed(self):
        return not self.failing


def central_difference(fn, params, i, h, stencil=2):
    """Derivative of ``fn`` along coordinate ``i`` by a 2- or 4-point central stencil."""
    e = torch.zeros_like(params)
    e[i] = h
    if stencil == 2:
        return float((fn(params + e) - fn(params - e)) / (2.0 * h))
    if stencil == 4:
        num = -fn(params + 2 * e) + 8.0 * fn(params + e) - 8.0 * fn(params - e) + fn(params - 2 * e)
        return float(num / (12.0 * h))
    raise ValueError("stencil must be 2 or 4")


def check_gradient(fn, params, names=None, h=1e-5, tolerance=1e-4, max_components=200,
                   seed=0, floor=1e-6, stencil=2):
    """Compare the autodiff gradient of ``fn`` with central differences.

    Components whose analytic and numeric magnitudes are both below
    ``floor`` are skipped.  With more than ``max_components`` parameters a
    seeded random subset of that size is checked.  ``stencil=4`` uses the
    fourth-order formula, whose smaller truncation error permits a larger
    ``h`` and hence less roundoff noise.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    params = as_tensor(params).detach().clone()
    g = grad(fn, params)
    n = params.numel()
    if n > max_components:
        idx = np.sort(np.random.default_rng(seed).choice(n, max_components, replace=False))
    else:
        idx = np.arange(n)
    names = names or [f"p[{i}]" for i in range(n)]
    worst = 0.0
    failing = []
    skipped = 0
    with torch.no_grad():
        for i in idx:
            fd = central_difference(fn, params, int(i), h, stencil)
            ad = float(g[i])
            scale = max(abs(ad), abs(fd))
            if scale < floor:
                skipped += 1
                continue
            rel = abs(ad - fd) / scale
            worst = max(worst, rel)
            if rel > tolerance:
                failing.append((names[i], ad, fd, rel))
    return FiniteDiffReport(worst, len(idx) - skipped, skipped, failing, tolerance)


def finite_diff_check(net, data_batch, config, posterior=None, h=1e-5, tolerance=1e-4,
                      max_components=200, n_train=None, stencil=2):
    """Gradient check of the configured objective on one batch ``(x, t)``."""
    x, t = (as_tensor(a) for a in data_batch)
    if config.variational and posterior is None:
        posterior = nw.init_posterior(net, config.posterior_scale)
    if not config.variational:
        posterior = None
    flat, layout = nw.flatten(net, posterior)
    f = make_objective(net, posterior, layout, config, n_train or x.shape[0])
    return check_gradient(
        lambda p: f(p, x, t), flat, layout.names(), h, tolerance, max_components,
        seed=config.seed, stencil=stencil,
    )


def as_float64(x):
    return torch.as_tensor(x, dtype=DTYPE)
