"""Small differentiable toolkit on numpy: dense layers, GRUs, losses, ADAM.

Every layer comes as a ``*_forward`` returning ``(output, cache)`` and a
matching ``*_backward`` taking the upstream gradient and the cache. Arrays
are float32 for training; pass float64 arrays everywhere for gradient checks.
Sequences are time-major: ``(T, B, features)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

LOG_CLAMP = 1e-12


# --------------------------------------------------------------------------- params


class ParamStore:
    """Ordered named parameters plus ADAM moment buffers."""

    def __init__(self, dtype=np.float32) -> None:
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=self.dtype)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    @property
    def n_values(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(p) for k, p in self.params.items()}

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k, p in self.params.items():
            out.add(k, p)
        out.t = self.t
        for k in self.params:
            out.m[k] = self.m[k].astype(dtype)
            out.v[k] = self.v[k].astype(dtype)
        return out


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def add_dense(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    store.add(f"{name}.W", glorot(rng, n_in, n_out))
    store.add(f"{name}.b", np.zeros(n_out))


def add_gru(store: ParamStore, name: str, n_in: int, n_hidden: int, rng: np.random.Generator) -> None:
    """Gate blocks are laid out ``[update z | reset r | candidate h~]`` along the last axis."""
    store.add(f"{name}.W", np.concatenate([glorot(rng, n_in, n_hidden) for _ in range(3)], axis=1))
    store.add(f"{name}.U", np.concatenate([orthogonal(rng, n_hidden) for _ in range(3)], axis=1))
    store.add(f"{name}.b", np.zeros(3 * n_hidden))


# --------------------------------------------------------------------------- activations


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and costs one ufunc call
    return 0.5 + 0.5 * np.tanh(0.5 * x)


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    # backward expressed through the activation's output y
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "sigmoid": (sigmoid, lambda y: y * (1.0 - y)),
    "linear": (lambda x: x, lambda y: np.ones_like(y)),
}


def matmul(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``x @ W`` whose rows do not depend on how many rows are stacked together.

    BLAS sends a single row through a matrix-vector kernel that sums in a
    different order from the matrix-matrix one, so one bar decoded alone would
    differ in the last bits from the same bar decoded in a batch.
    """
    x2 = x.reshape(-1, x.shape[-1])
    if len(x2) == 1:
        y = (np.concatenate([x2, x2]) @ W)[:1]
    else:
        y = x2 @ W
    return y.reshape(*x.shape[:-1], W.shape[-1])


# --------------------------------------------------------------------------- dense


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray, activation: str = "tanh"):
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"dense input has {x.shape[-1]} features, weight expects {W.shape[0]}")
    y = _ACTIVATIONS[activation][0](matmul(x, W) + b)
    return y, (x, W, y, activation)


def dense_backward(dy: np.ndarray, cache):
    x, W, y, activation = cache
    da = dy * _ACTIVATIONS[activation][1](y)
    x2 = x.reshape(-1, x.shape[-1])
    da2 = da.reshape(-1, da.shape[-1])
    return da @ W.T, x2.T @ da2, da2.sum(axis=0)


def dense(W: np.ndarray, b: np.ndarray, x: np.ndarray, activation: str = "tanh") -> np.ndarray:
    return dense_forward(W, b, x, activation)[0]


# --------------------------------------------------------------------------- GRU


def gru_step(W: np.ndarray, U: np.ndarray, b: np.ndarray, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """One GRU update (Cho et al. 2014): the reset gate scales ``h`` before ``U_h``."""
    hs, _ = gru_forward(W, U, b, x[None], h)
    return hs[0]


@dataclass
class _GruCache:
    xs: np.ndarray
    hs: np.ndarray  # (T + 1, B, H), hs[0] = h0
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray
    W: np.ndarray
    U: np.ndarray


def gru_forward(W: np.ndarray, U: np.ndarray, b: np.ndarray, xs: np.ndarray, h0: np.ndarray):
    """Run a GRU over ``xs`` of shape ``(T, B, n_in)`` from state ``h0`` ``(B, H)``.

    Returns all hidden states ``(T, B, H)`` and a cache for :func:`gru_backward`.
    """
    T, B, n_in = xs.shape
    H = U.shape[0]
    if W.shape != (n_in, 3 * H) or h0.shape != (B, H):
        raise ValueError(f"GRU shape mismatch: W{W.shape} U{U.shape} xs{xs.shape} h0{h0.shape}")
    xp = (matmul(xs.reshape(T * B, n_in), W) + b).reshape(T, B, 3 * H)
    Uzr, Uc = U[:, : 2 * H], U[:, 2 * H :]
    hs = np.empty((T + 1, B, H), dtype=h0.dtype)
    z = np.empty((T, B, H), dtype=h0.dtype)
    r = np.empty_like(z)
    c = np.empty_like(z)
    hs[0] = h0
    for t in range(T):
        h = hs[t]
        zr = sigmoid(xp[t, :, : 2 * H] + matmul(h, Uzr))
        z[t], r[t] = zr[:, :H], zr[:, H:]
        c[t] = np.tanh(xp[t, :, 2 * H :] + matmul(r[t] * h, Uc))
        hs[t + 1] = h + z[t] * (c[t] - h)
    return hs[1:], _GruCache(xs, hs, z, r, c, W, U)


def gru_backward(dhs: np.ndarray, cache: _GruCache):
    """Backpropagation through time.

    ``dhs`` is the loss gradient w.r.t. every output state ``(T, B, H)``.
    Returns ``(dxs, dW, dU, db, dh0)``.
    """
    xs, hs, z, r, c = cache.xs, cache.hs, cache.z, cache.r, cache.c
    T, B, n_in = xs.shape
    H = hs.shape[-1]
    U = cache.U
    UzrT, UcT = U[:, : 2 * H].T, U[:, 2 * H :].T
    da = np.empty((T, B, 3 * H), dtype=hs.dtype)
    dU = np.zeros_like(U)
    dh = np.zeros((B, H), dtype=hs.dtype)
    for t in range(T - 1, -1, -1):
        h = hs[t]
        dh = dh + dhs[t]
        dc = dh * z[t]
        dz = dh * (c[t] - h)
        dh_prev = dh * (1.0 - z[t])
        dac = dc * (1.0 - c[t] * c[t])
        drh = dac @ UcT
        dr = drh * h
        dh_prev += drh * r[t]
        daz = dz * z[t] * (1.0 - z[t])
        dar = dr * r[t] * (1.0 - r[t])
        dazr = np.concatenate([daz, dar], axis=1)
        dh_prev += dazr @ UzrT
        dU[:, : 2 * H] += h.T @ dazr
        dU[:, 2 * H :] += (r[t] * h).T @ dac
        da[t, :, : 2 * H] = dazr
        da[t, :, 2 * H :] = dac
        dh = dh_prev
    da2 = da.reshape(T * B, 3 * H)
    dW = xs.reshape(T * B, n_in).T @ da2
    dxs = (da2 @ cache.W.T).reshape(T, B, n_in)
    return dxs, dW, dU, da2.sum(axis=0), dh


# --------------------------------------------------------------------------- losses


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(p: np.ndarray, target) -> np.ndarray:
    """``-log p[target]`` along the last axis; ``target`` holds class indices."""
    target = np.asarray(target)
    picked = np.take_along_axis(p, target[..., None], axis=-1)[..., 0]
    return -np.log(np.maximum(picked, LOG_CLAMP))


def softmax_cross_entropy(logits: np.ndarray, target):
    """Mean cross-entropy of ``softmax(logits)`` against index targets, and its logit gradient."""
    target = np.asarray(target)
    p = softmax(logits)
    loss = cross_entropy(p, target).mean()
    grad = p.copy()
    np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], -1) - 1.0, -1)
    return loss, grad / target.size, p


def mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a) - np.asarray(b)
    return float(np.mean(d * d))


def kl_diag_gaussian(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over the last axis."""
    mu = np.asarray(mu)
    sigma = np.asarray(sigma)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return 0.5 * np.sum(mu * mu + sigma * sigma - 2.0 * np.log(sigma) - 1.0, axis=-1)


def kl_from_logvar(mu: np.ndarray, logvar: np.ndarray):
    """Same divergence parameterized by log-variance; returns ``(kl, dmu, dlogvar)``."""
    var = np.exp(logvar)
    kl = 0.5 * np.sum(mu * mu + var - logvar - 1.0, axis=-1)
    return kl, mu, 0.5 * (var - 1.0)


def reparameterize(mu: np.ndarray, sigma: np.ndarray, rng: np.random.Generator, sigma_eps: float):
    """``z = mu + sigma * eps`` with ``eps ~ N(0, sigma_eps * I)`` (``sigma_eps`` is a variance).

    Returns ``(z, eps)``; ``eps`` is needed for the backward pass through ``sigma``.
    """
    if sigma_eps < 0:
        raise ValueError("sigma_eps must be non-negative")
    if sigma_eps == 0:
        eps = np.zeros_like(mu)
    else:
        eps = (rng.standard_normal(np.shape(mu)) * np.sqrt(sigma_eps)).astype(np.asarray(mu).dtype)
    return mu + sigma * eps, eps


# --------------------------------------------------------------------------- optimizer


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    if set(grads) != set(store.params):
        raise ValueError("gradient names do not match parameter names")
    store.t += 1
    c1 = 1.0 - beta1**store.t
    c2 = 1.0 - beta2**store.t
    for name, p in store.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return store


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# --------------------------------------------------------------------------- gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None = None
    n_checked: int = 0
    errors: dict[str, float] = field(default_factory=dict)


def grad_check(
    f: Callable[[dict[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    max_checks_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    ``f(params)`` must return ``(loss, grads)``; params are perturbed in place
    and restored. Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``. With
    ``max_checks_per_param`` only that many random entries per tensor are probed.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {name} is {p.dtype}")
    _, analytic = f(params)
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    rng = rng or np.random.default_rng(0)
    result = GradCheckResult(0.0)
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks_per_param is not None and flat.size > max_checks_per_param:
            idx = np.sort(rng.choice(flat.size, max_checks_per_param, replace=False))
        worst_here = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f(params)[0])
            flat[i] = orig - step
            down = float(f(params)[0])
            flat[i] = orig
            num = (up - down) / (2 * step)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            result.n_checked += 1
            worst_here = max(worst_here, err)
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (name, np.unravel_index(i, p.shape))
        result.errors[name] = worst_here
    return result
