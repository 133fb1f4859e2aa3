"""A small diagonal-Gaussian VAE with hand-written reverse-mode gradients.

Encoder and decoder are tanh MLPs. All parameters, including the global
decoder log-scale ``log sigma_x``, live in one flat float64 vector so that
optimisers, finite-difference checks and checkpoints all see the same layout.
"""
import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .datasets import as_dataset
from .errors import DivergedError

LOG_SIGMA_X_FLOOR = float(np.log(1e-3))
_LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class ForwardPass:
    x: np.ndarray
    eps: np.ndarray
    enc_cache: list
    dec_cache: list
    mu: np.ndarray
    log_sigma: np.ndarray
    z: np.ndarray
    g: np.ndarray


class GaussianVae:
    def __init__(self, d_x, d_z=2, hidden=(64, 64), seed=0, log_sigma_x=0.0, activation="tanh"):
        if activation != "tanh":
            raise ValueError("only the tanh nonlinearity is implemented")
        self.d_x, self.d_z = int(d_x), int(d_z)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.seed = seed
        enc_sizes = [self.d_x, *self.hidden, 2 * self.d_z]
        dec_sizes = [self.d_z, *self.hidden, self.d_x]
        self.layout = []
        for tag, sizes in (("enc", enc_sizes), ("dec", dec_sizes)):
            for k in range(len(sizes) - 1):
                self.layout.append((f"{tag}.W{k}", (sizes[k], sizes[k + 1])))
                self.layout.append((f"{tag}.b{k}", (sizes[k + 1],)))
        self.layout.append(("log_sigma_x", ()))
        self.offsets = {}
        off = 0
        for name, shape in self.layout:
            size = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (off, off + size, shape)
            off += size
        self.params = np.zeros(off)
        rng = np.random.default_rng(seed)
        for name, shape in self.layout:
            if ".W" in name:
                self.view(name)[...] = rng.standard_normal(shape) / np.sqrt(shape[0])
        self.params[-1] = log_sigma_x
        self.floor_events = 0

    @property
    def num_params(self):
        return self.params.size

    def view(self, name, vec=None):
        start, stop, shape = self.offsets[name]
        vec = self.params if vec is None else vec
        return vec[start:stop].reshape(shape)

    def copy(self):
        other = GaussianVae.__new__(GaussianVae)
        other.__dict__.update(self.__dict__)
        other.params = self.params.copy()
        return other

    def architecture(self):
        return {"d_x": self.d_x, "d_z": self.d_z, "hidden": list(self.hidden), "activation": self.activation}

    @property
    def log_sigma_x(self):
        return float(self.params[-1])

    def floor_sigma_x(self):
        if self.params[-1] < LOG_SIGMA_X_FLOOR:
            self.params[-1] = LOG_SIGMA_X_FLOOR
            self.floor_events += 1

    def _layers(self, tag):
        n = len(self.hidden) + 1
        return [(self.view(f"{tag}.W{k}"), self.view(f"{tag}.b{k}")) for k in range(n)]

    @staticmethod
    def _mlp(x, layers):
        cache = [x]
        h = x
        for k, (W, b) in enumerate(layers):
            h = h @ W + b
            if k < len(layers) - 1:
                h = np.tanh(h)
            cache.append(h)
        return h, cache

    def _mlp_backward(self, tag, cache, d_out, grad):
        layers = self._layers(tag)
        d = d_out
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            if k < len(layers) - 1:
                d = d * (1.0 - cache[k + 1] ** 2)
            self.view(f"{tag}.W{k}", grad)[...] += cache[k].T @ d
            self.view(f"{tag}.b{k}", grad)[...] += d.sum(axis=0)
            d = d @ W.T
        return d

    def encode(self, x):
        out, _ = self._mlp(np.atleast_2d(x), self._layers("enc"))
        return out[:, : self.d_z], out[:, self.d_z :]

    def decode(self, z):
        out, _ = self._mlp(np.atleast_2d(z), self._layers("dec"))
        return out

    @staticmethod
    def reparam_sample(mu, log_sigma, eps):
        return mu + np.exp(log_sigma) * eps

    def forward(self, x, eps):
        x = np.atleast_2d(x)
        enc_out, enc_cache = self._mlp(x, self._layers("enc"))
        mu, log_sigma = enc_out[:, : self.d_z], enc_out[:, self.d_z :]
        z = self.reparam_sample(mu, log_sigma, eps)
        g, dec_cache = self._mlp(z, self._layers("dec"))
        return ForwardPass(x, eps, enc_cache, dec_cache, mu, log_sigma, z, g)

    def backward(self, fp, d_g, d_mu=None, d_log_sigma=None, d_log_sigma_x=0.0):
        """Gradient of a scalar loss given its partials w.r.t. the forward outputs."""
        grad = np.zeros_like(self.params)
        d_z = self._mlp_backward("dec", fp.dec_cache, d_g, grad)
        d_mu = d_z if d_mu is None else d_mu + d_z
        d_ls = d_z * np.exp(fp.log_sigma) * fp.eps
        if d_log_sigma is not None:
            d_ls = d_ls + d_log_sigma
        self._mlp_backward("enc", fp.enc_cache, np.concatenate([d_mu, d_ls], axis=1), grad)
        grad[-1] += d_log_sigma_x
        return grad


def kl_diag(mu, log_sigma):
    """Per-datum ``KL(N(mu, sigma^2) || N(0, I))``."""
    return 0.5 * np.sum(mu**2 + np.exp(2 * log_sigma) - 1.0 - 2.0 * log_sigma, axis=1)


def gaussian_loglik(x, g, log_sigma_x):
    d = x.shape[1]
    sq = np.sum((x - g) ** 2, axis=1)
    return -0.5 * sq * np.exp(-2 * log_sigma_x) - d * log_sigma_x - 0.5 * d * _LOG_2PI


def elbo(model, x, eps):
    fp = model.forward(x, eps)
    dist = gaussian_loglik(fp.x, fp.g, model.log_sigma_x)
    kl = kl_diag(fp.mu, fp.log_sigma)
    return {"value": float(np.mean(dist - kl)), "distortion": float(np.mean(dist)), "kl": float(np.mean(kl))}


class NegElbo:
    """``-ELBO`` averaged over the batch."""

    name = "elbo"

    def __call__(self, model, x, eps, fp=None):
        fp = model.forward(x, eps) if fp is None else fp
        B, D = fp.x.shape
        ls = model.log_sigma_x
        inv_var = np.exp(-2 * ls)
        resid = fp.g - fp.x
        sq = np.sum(resid**2, axis=1)
        kl = kl_diag(fp.mu, fp.log_sigma)
        dist = -0.5 * sq * inv_var - D * ls - 0.5 * D * _LOG_2PI
        loss = float(np.mean(kl - dist))
        d_g = resid * inv_var / B
        d_mu = fp.mu / B
        d_ls = (np.exp(2 * fp.log_sigma) - 1.0) / B
        d_lsx = float(np.mean(D - sq * inv_var))
        grad = model.backward(fp, d_g, d_mu, d_ls, d_lsx)
        info = {"kl": float(np.mean(kl)), "distortion": float(np.mean(dist)), "mse": float(np.mean(resid**2))}
        return loss, grad, info


def gradients(model, objective, x, eps):
    """Gradient of the loss ``objective`` (``-ELBO`` or a GECO Lagrangian)."""
    if objective == "elbo":
        objective = NegElbo()
    _, grad, _ = objective(model, x, eps)
    if not np.all(np.isfinite(grad)):
        bad = [name for name, _ in model.layout if not np.all(np.isfinite(model.view(name, grad)))]
        raise DivergedError(f"non-finite gradient in {bad}")
    return grad


def finite_difference_grad(loss_fn, params, h=1e-6, indices=None):
    """Central differences of ``loss_fn(params)`` on selected coordinates."""
    idx = range(params.size) if indices is None else indices
    out = {}
    p = params.copy()
    for k in idx:
        old = p[k]
        p[k] = old + h
        up = loss_fn(p)
        p[k] = old - h
        down = loss_fn(p)
        p[k] = old
        out[k] = (up - down) / (2 * h)
    return out


def average_kl(model, data):
    X = as_dataset(data).points
    mu, ls = model.encode(X)
    return float(np.mean(kl_diag(mu, ls)))


def marginal_kl_from_posteriors(mu, log_sigma, S, rng):
    """Monte Carlo ``KL(q(z) || N(0, I))`` for the mixture ``q = mean_i N(mu_i, sigma_i^2)``.

    Returns ``(estimate, standard_error)``.
    """
    if S < 100:
        raise ValueError("sample count too small")
    mu = np.atleast_2d(mu)
    log_sigma = np.atleast_2d(log_sigma)
    n, d = mu.shape
    if n > 10_000:
        raise ValueError("mixture too large for exact evaluation (n > 10^4)")
    comp = rng.integers(0, n, size=S)
    z = mu[comp] + np.exp(log_sigma[comp]) * rng.standard_normal((S, d))
    terms = np.empty(S)
    inv = np.exp(-2 * log_sigma)
    norm = -np.sum(log_sigma, axis=1) - 0.5 * d * _LOG_2PI
    chunk = max(1, 2_000_000 // max(n * d, 1))
    for start in range(0, S, chunk):
        zs = z[start : start + chunk]
        quad = np.sum((zs[:, None, :] - mu[None]) ** 2 * inv[None], axis=2)
        log_q = logsumexp(norm[None] - 0.5 * quad, axis=1) - np.log(n)
        log_p = -0.5 * np.sum(zs**2, axis=1) - 0.5 * d * _LOG_2PI
        terms[start : start + chunk] = log_q - log_p
    return float(terms.mean()), float(terms.std(ddof=1) / np.sqrt(S))


def marginal_kl(model, data, S=10_000, seed=0):
    X = as_dataset(data).points
    mu, ls = model.encode(X)
    return marginal_kl_from_posteriors(mu, ls, S, np.random.default_rng(seed))


def sigma_opt(model, data, seed=0):
    """Root-mean-square reconstruction error per data dimension.

    Reconstructions decode one posterior sample per datum; the model's own
    ``sigma_x`` plays no part.
    """
    X = as_dataset(data).points
    rng = np.random.default_rng(seed)
    mu, ls = model.encode(X)
    z = model.reparam_sample(mu, ls, rng.standard_normal(mu.shape))
    g = model.decode(z)
    return float(np.sqrt(np.mean((X - g) ** 2)))


def gaussian_nll_per_dim(model, data, seed=0):
    """Per-dimension Gaussian NLL of posterior-sampled reconstructions at ``sigma_opt``."""
    s = max(sigma_opt(model, data, seed), 1e-12)
    return float(0.5 + np.log(s) + 0.5 * _LOG_2PI)


_MAGIC = b"GECOVAE1"


def save_checkpoint(model, path, extra=None):
    """Write ``MAGIC | uint64 header length | JSON header | float64 LE params``."""
    header = {"architecture": model.architecture(), "seed": model.seed, "num_params": model.num_params}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(model.params.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not a model checkpoint")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length))
        params = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    arch = header["architecture"]
    model = GaussianVae(arch["d_x"], arch["d_z"], tuple(arch["hidden"]), seed=header.get("seed", 0))
    if params.size != model.num_params:
        raise ValueError("parameter block does not match the architecture")
    model.params = params
    return model, header
