"""Constrained VAE training: minimise the KL subject to reconstruction constraints.

The Lagrangian is ``L_b = mean KL + b . C`` with one positive multiplier per
constraint. Each step evaluates the batch constraint ``C_hat``, folds it into
an exponential moving average ``C_ma``, descends the model parameters on
``L_b`` and then updates ``log b += lr_b * C``.
"""
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix

from .errors import DivergedError
from .io import write_csv
from .vae import kl_diag

LOG_B_CLAMP = 20.0
PNCC_EPS = 1e-8
KINDS = ("RE", "FRE", "pNCC")


@dataclass(frozen=True)
class ConstraintSpec:
    """One reconstruction constraint.

    ``kappa`` is a per-dimension RMS tolerance for RE/FRE and a correlation
    threshold in ``(0, 1]`` for pNCC. Patch-based kinds need ``image_shape``.
    """

    kind: str = "RE"
    kappa: float = 0.1
    patch: int = 4
    stride: int = 2
    image_shape: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.kind == "pNCC" and self.kappa > 1:
            raise ValueError("kappa must lie in (0, 1] for pNCC")
        if self.kind != "RE":
            if self.image_shape is None:
                raise ValueError(f"{self.kind} needs image_shape")
            shape = tuple(int(s) for s in self.image_shape)
            object.__setattr__(self, "image_shape", shape)
            if self.patch < 1 or self.stride < 1:
                raise ValueError("patch and stride must be positive")
            if self.patch > min(shape):
                raise ValueError("patch size exceeds image side")

    @property
    def label(self):
        return self.kind


@lru_cache(maxsize=32)
def patch_index(image_shape, patch, stride):
    """Flat pixel indices of every ``patch x patch`` window, shape ``(P, patch^2)``."""
    H, W = image_shape
    rows = range(0, H - patch + 1, stride)
    cols = range(0, W - patch + 1, stride)
    local = (np.arange(patch)[:, None] * W + np.arange(patch)[None, :]).ravel()
    starts = np.array([r * W + c for r in rows for c in cols])
    return starts[:, None] + local[None, :]


@lru_cache(maxsize=32)
def _scatter_matrix(image_shape, patch, stride):
    idx = patch_index(image_shape, patch, stride)
    D = image_shape[0] * image_shape[1]
    rows = np.arange(idx.size)
    return csr_matrix((np.ones(idx.size), (rows, idx.ravel())), shape=(idx.size, D))


def _scatter(grad_patches, spec):
    """Sum per-patch pixel gradients back onto the image."""
    S = _scatter_matrix(spec.image_shape, spec.patch, spec.stride)
    B = grad_patches.shape[0]
    return np.asarray((S.T @ grad_patches.reshape(B, -1).T).T)


def _features(p):
    # per-patch mean and standard deviation
    mean = p.mean(axis=2)
    std = p.std(axis=2)
    return mean, std


def _whiten(p):
    u = p - p.mean(axis=2, keepdims=True)
    r = np.sqrt(np.sum(u**2, axis=2, keepdims=True))
    return u, r, u / (r + PNCC_EPS)


def evaluate_constraint(spec, x, g, with_grad=False):
    """Batch value of one constraint, optionally with ``d value / d g``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g = np.atleast_2d(np.asarray(g, dtype=float))
    if x.shape != g.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {g.shape}")
    B, D = x.shape
    k2 = spec.kappa**2
    if spec.kind == "RE":
        diff = g - x
        value = float(np.mean(diff**2)) - k2
        return (value, 2.0 * diff / diff.size) if with_grad else value
    if spec.image_shape[0] * spec.image_shape[1] != D:
        raise ValueError("image_shape does not match the data dimension")
    idx = patch_index(spec.image_shape, spec.patch, spec.stride)
    px, pg = x[:, idx], g[:, idx]
    P, K = idx.shape
    if spec.kind == "FRE":
        mx, sx = _features(px)
        mg, sg = _features(pg)
        dm, ds = mg - mx, sg - sx
        value = float((np.sum(dm**2) + np.sum(ds**2)) / (2 * B * P)) - k2
        if not with_grad:
            return value
        scale = 2.0 / (2 * B * P)
        d_mean = (scale * dm)[:, :, None] / K
        centred = pg - mg[:, :, None]
        # d std / d p = (p - mean) / (K std); zero where the patch is flat
        safe = np.where(sg > 0, sg, 1.0)
        d_std = np.where(sg[:, :, None] > 0, (scale * ds)[:, :, None] * centred / (K * safe[:, :, None]), 0.0)
        return value, _scatter(d_mean + d_std, spec)
    _, _, wx = _whiten(px)
    ug, rg, wg = _whiten(pg)
    dots = np.sum(wx * wg, axis=2)
    value = float(np.sum(spec.kappa - dots) / B)
    if not with_grad:
        return value
    a = wx
    denom = rg + PNCC_EPS
    au = np.sum(a * ug, axis=2, keepdims=True)
    safe_r = np.where(rg > 0, rg, 1.0)
    # a flat patch whitens to 0 and passes no gradient
    d_u = np.where(rg > 0, a / denom - au * ug / (safe_r * denom**2), 0.0)
    d_u = -d_u / B
    d_p = d_u - d_u.mean(axis=2, keepdims=True)
    return value, _scatter(d_p, spec)


@dataclass
class ConstraintBatch:
    """Constraint values with their sensitivities w.r.t. the reconstructions."""

    value: np.ndarray
    grad_g: list = field(default_factory=list)


def evaluate_constraints(specs, x, g):
    vals, grads = [], []
    for spec in specs:
        v, dg = evaluate_constraint(spec, x, g, with_grad=True)
        vals.append(v)
        grads.append(dg)
    return ConstraintBatch(np.array(vals), grads)


@dataclass(frozen=True)
class LagrangeState:
    """Multipliers are stored as ``log b`` so that ``b > 0`` by construction."""

    log_b: np.ndarray
    c_ma: Optional[np.ndarray] = None
    alpha: float = 0.99
    lr_b: float = 0.01
    t: int = 0
    clamp_events: int = 0

    def __post_init__(self):
        log_b = np.atleast_1d(np.asarray(self.log_b, dtype=float))
        if not np.all(np.isfinite(log_b)):
            raise ValueError("log multipliers must be finite")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if not self.lr_b >= 0:
            raise ValueError("lr_b must be non-negative")
        if self.t < 0:
            raise ValueError("step count must be non-negative")
        object.__setattr__(self, "log_b", log_b)

    @property
    def b(self):
        return np.exp(self.log_b)

    @classmethod
    def initial(cls, num_constraints, alpha=0.99, lr_b=0.01, b0=1.0):
        if not b0 > 0:
            raise ValueError("initial multiplier must be positive")
        return cls(np.full(num_constraints, np.log(b0)), None, alpha, lr_b)


def moving_average_update(state, c_hat):
    c_hat = np.atleast_1d(np.asarray(c_hat, dtype=float))
    if state.t == 0 or state.c_ma is None:
        return replace(state, c_ma=c_hat.copy())
    a = state.alpha
    return replace(state, c_ma=a * state.c_ma + (1.0 - a) * c_hat)


def stop_gradient_combine(c_hat, c_ma):
    """Value of ``C_ma`` carrying the parameter sensitivity of ``C_hat``.

    ``c_hat`` may be a :class:`ConstraintBatch`, whose ``grad_g`` is passed
    through unchanged, or a plain array (value only).
    """
    c_ma = np.atleast_1d(np.asarray(c_ma, dtype=float))
    if isinstance(c_hat, ConstraintBatch):
        if c_hat.value.shape != c_ma.shape:
            raise ValueError("constraint shapes differ")
        return ConstraintBatch(c_ma.copy(), c_hat.grad_g)
    if np.atleast_1d(c_hat).shape != c_ma.shape:
        raise ValueError("constraint shapes differ")
    return c_ma.copy()


def multiplier_update(state, C):
    """``log b += lr_b * C``, clamped to ``[-20, 20]``."""
    C = np.atleast_1d(np.asarray(C, dtype=float))
    log_b = state.log_b + state.lr_b * C
    clipped = np.clip(log_b, -LOG_B_CLAMP, LOG_B_CLAMP)
    events = int(np.count_nonzero(clipped != log_b))
    return replace(state, log_b=clipped, clamp_events=state.clamp_events + events)


class GecoLagrangian:
    """``L_b = mean KL + b . C`` with ``C`` the combined constraint.

    When ``c_ma`` is None the batch constraint is used as is. The returned
    ``info`` holds the batch constraint under ``c_hat``.
    """

    name = "geco"

    def __init__(self, specs, b, c_ma=None):
        self.specs = list(specs)
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        self.c_ma = None if c_ma is None else np.atleast_1d(np.asarray(c_ma, dtype=float))

    def __call__(self, model, x, eps, fp=None):
        fp = model.forward(x, eps) if fp is None else fp
        c_hat = evaluate_constraints(self.specs, fp.x, fp.g)
        C = c_hat if self.c_ma is None else stop_gradient_combine(c_hat, self.c_ma)
        return lagrangian_value_and_grad(model, fp, C, self.b, c_hat)


def lagrangian_value_and_grad(model, fp, C, b, c_hat):
    B = fp.x.shape[0]
    kl = kl_diag(fp.mu, fp.log_sigma)
    kl_mean = float(np.mean(kl))
    penalty = float(np.dot(b, C.value))
    for name, v in (("kl", kl_mean), ("constraint", penalty)):
        if not np.isfinite(v):
            raise DivergedError(f"non-finite {name} term in the Lagrangian")
    d_g = np.zeros_like(fp.g)
    for bj, gj in zip(b, C.grad_g):
        d_g += bj * gj
    d_mu = fp.mu / B
    d_ls = (np.exp(2 * fp.log_sigma) - 1.0) / B
    grad = model.backward(fp, d_g, d_mu, d_ls, 0.0)
    info = {
        "kl": kl_mean,
        "mse": float(np.mean((fp.g - fp.x) ** 2)),
        "c_hat": c_hat.value,
        "c_value": C.value,
    }
    return kl_mean + penalty, grad, info


@dataclass
class GecoStepReport:
    c_hat: np.ndarray
    c_ma: np.ndarray
    c_value: np.ndarray
    b_before: np.ndarray
    b_after: np.ndarray
    log_b_before: np.ndarray
    log_b_after: np.ndarray
    clamped: bool
    lagrangian: float
    kl: float
    distortion: float


def geco_step(model, batch, state, specs, optimizer, rng):
    """One constrained step: parameters first, then multipliers.

    ``distortion`` in the report is the batch mean squared error per
    dimension. The model is updated in place and also returned.
    """
    x = np.atleast_2d(batch)
    eps = rng.standard_normal((x.shape[0], model.d_z))
    fp = model.forward(x, eps)
    c_hat = evaluate_constraints(specs, fp.x, fp.g)
    if not np.all(np.isfinite(c_hat.value)):
        bad = [s.kind for s, v in zip(specs, c_hat.value) if not np.isfinite(v)]
        raise DivergedError(f"non-finite constraint {bad}")
    state = moving_average_update(state, c_hat.value)
    C = stop_gradient_combine(c_hat, state.c_ma)
    loss, grad, info = lagrangian_value_and_grad(model, fp, C, state.b, c_hat)
    if not np.all(np.isfinite(grad)):
        raise DivergedError("non-finite gradient of the Lagrangian")
    optimizer.step(model.params, grad)
    model.floor_sigma_x()
    before = state
    state = multiplier_update(state, C.value)
    state = replace(state, t=state.t + 1)
    report = GecoStepReport(
        c_hat=c_hat.value,
        c_ma=state.c_ma.copy(),
        c_value=C.value,
        b_before=before.b,
        b_after=state.b,
        log_b_before=before.log_b,
        log_b_after=state.log_b,
        clamped=state.clamp_events > before.clamp_events,
        lagrangian=loss,
        kl=info["kl"],
        distortion=info["mse"],
    )
    return model, state, report


def trace_header(specs):
    L = len(specs)
    names = [f"{s.kind}{j}" if L > 1 else s.kind for j, s in enumerate(specs)]
    return (
        ["step", "distortion", "kl"]
        + [f"b_{n}" for n in names]
        + [f"C_ma_{n}" for n in names]
        + [f"C_hat_{n}" for n in names]
        + ["elbo"]
    )


def write_trace_csv(rows, specs, path):
    write_csv(path, trace_header(specs), rows)
