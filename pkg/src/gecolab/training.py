"""Training loops for the toy VAE: plain ELBO ascent or constrained steps."""
from dataclasses import dataclass, field

import numpy as np

from . import geco
from .datasets import as_dataset
from .errors import DivergedError
from .seeds import derive_seed
from .vae import NegElbo, elbo


class Adam:
    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr >= 0:
            raise ValueError("learning rate must be non-negative")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        """Descend in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad**2
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    objective: str = "elbo"
    constraints: tuple = field(default_factory=tuple)
    alpha: float = 0.99
    lr_b: float = 0.01
    b0: float = 1.0
    log_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.objective not in ("elbo", "geco"):
            raise ValueError("objective must be 'elbo' or 'geco'")
        if self.objective == "geco" and not self.constraints:
            raise ValueError("the geco objective needs at least one constraint")
        if self.batch_size < 0 or self.log_every < 1:
            raise ValueError("batch_size must be >= 0 and log_every >= 1")


@dataclass
class TrainResult:
    model: object
    trace: list
    state: object = None
    header: list = field(default_factory=list)


def _batches(n, batch_size, rng):
    if batch_size == 0 or batch_size >= n:
        while True:
            yield slice(None)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start : start + batch_size]


def train(model, data, cfg):
    """Train ``model`` in place and return it with a per-step trace.

    Trace rows follow the ``trace.csv`` schema: step, distortion (batch MSE
    per dimension), kl, multipliers, moving averages, batch constraints and
    the batch ELBO under the model's current ``sigma_x``.
    """
    X = as_dataset(data).points
    if X.shape[1] != model.d_x:
        raise ValueError("data dimension does not match the model")
    rng = np.random.default_rng(cfg.seed)
    # trace evaluation draws its own noise so logging never perturbs training
    eval_rng = np.random.default_rng(derive_seed(cfg.seed, "trace"))
    opt = Adam(model.num_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    batches = _batches(len(X), cfg.batch_size, rng)
    specs = list(cfg.constraints) if cfg.objective == "geco" else []
    header = geco.trace_header(specs)
    trace = []
    state = None
    if cfg.objective == "geco":
        state = geco.LagrangeState.initial(len(specs), cfg.alpha, cfg.lr_b, cfg.b0)
    loss_fn = NegElbo()
    for step in range(cfg.steps):
        x = X[next(batches)]
        if cfg.objective == "geco":
            _, state, rep = geco.geco_step(model, x, state, specs, opt, rng)
            kl, dist = rep.kl, rep.distortion
            extra = [*rep.b_before, *rep.c_ma, *rep.c_hat]
        else:
            eps = rng.standard_normal((x.shape[0], model.d_z))
            loss, grad, info = loss_fn(model, x, eps)
            if not np.isfinite(loss):
                raise DivergedError("non-finite ELBO")
            opt.step(model.params, grad)
            model.floor_sigma_x()
            kl, dist = info["kl"], info["mse"]
            extra = []
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            value = elbo(model, x, eval_rng.standard_normal((x.shape[0], model.d_z)))["value"]
            trace.append([step, dist, kl, *extra, value])
    return TrainResult(model, trace, state, header)
