"""Differentiable building blocks with hand-written gradients.

Each op is a ``forward`` returning ``(output, cache)`` and a ``*_backward``
taking the upstream gradient and that cache. Inputs may carry any number of
leading batch axes. Everything is float64.

Row-vector convention throughout: a dense layer computes ``x @ W + b`` with
``W`` of shape ``(n_in, n_out)``, and the GRU input/recurrent matrices are
``(d, h)`` and ``(h, h)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ShapeMismatch, UninitializedState

GRU_GATES = ("r", "z", "h")


def _flat2(a):
    return a.reshape(-1, a.shape[-1])


# --- dense / activations -------------------------------------------------


def dense(x, W, b):
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"dense: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b, (x, W)


def dense_backward(dy, cache):
    x, W = cache
    dW = _flat2(x).T @ _flat2(dy)
    db = _flat2(dy).sum(axis=0)
    return dy @ W.T, dW, db


def relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy, mask):
    # subgradient at exactly 0 is 0
    return np.where(mask, dy, 0.0)


def sigmoid(x):
    """Logistic function; finite for any finite input."""
    y = expit(x)
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def tanh(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy, y):
    return dy * (1.0 - y * y)


# --- GRU -----------------------------------------------------------------


def _gru_shapes(params):
    Ur, Wr = params["Ur"], params["Wr"]
    d, h = Ur.shape
    for g in GRU_GATES:
        if params[f"U{g}"].shape != (d, h) or params[f"W{g}"].shape != (h, h) or params[f"b{g}"].shape != (h,):
            raise ShapeMismatch(f"GRU gate {g!r}: inconsistent parameter shapes")
    return d, h


def stack_gates(params, prefix):
    """Concatenate the r, z, h gate tensors along their last axis."""
    return np.concatenate([params[f"{prefix}{g}"] for g in GRU_GATES], axis=-1)


def gru_recurrence(gx, s0, W):
    """Run the GRU state update over time from precomputed input terms.

    Args:
        gx: ``(B, T, 3h)`` input contributions ``x_t U + b`` for the r, z and
            candidate gates, in that order.
        s0: ``(B, h)`` initial state.
        W: ``(h, 3h)`` recurrent matrices ``[W^r | W^z | W^h]``.

    Returns:
        ``(B, T, h)`` hidden states and the cache.
    """
    B, T, h3 = gx.shape
    h = h3 // 3
    if W.shape != (h, h3) or s0.shape != (B, h):
        raise ShapeMismatch(f"GRU recurrence: gx {gx.shape}, s0 {s0.shape}, W {W.shape}")
    # time-major buffers keep every per-step slice contiguous
    gxt = np.ascontiguousarray(gx.transpose(1, 0, 2))
    states = np.empty((T + 1, B, h))
    gates = np.empty((T, B, 2 * h))  # r | z
    m = np.empty((T, B, h))
    cand = np.empty((T, B, h))
    states[0] = s0
    for t in range(T):
        s = states[t]
        rec = s @ W
        rz = gates[t]
        np.add(gxt[t, :, : 2 * h], rec[:, : 2 * h], out=rz)
        expit(rz, out=rz)
        r_t, z_t = rz[:, :h], rz[:, h:]
        m[t] = rec[:, 2 * h :]
        c_t = cand[t]
        np.multiply(r_t, m[t], out=c_t)
        c_t += gxt[t, :, 2 * h :]
        np.tanh(c_t, out=c_t)
        # s' = c + z * (s - c)
        nxt = states[t + 1]
        np.subtract(s, c_t, out=nxt)
        nxt *= z_t
        nxt += c_t
    return states[1:].transpose(1, 0, 2), (states, gates, m, cand, W)


def gru_recurrence_backward(dstates, cache):
    """Backpropagation through time. Returns ``(dgx, ds0, dW)``."""
    states, gates, m, cand, W = cache
    T, B, h = cand.shape
    dst = np.ascontiguousarray(np.asarray(dstates).transpose(1, 0, 2))
    dpre = np.empty((T, B, 3 * h))  # grads of the r/z pre-activations and of W^h s
    dgx = np.empty((T, B, 3 * h))
    carry = np.zeros((B, h))
    for t in range(T - 1, -1, -1):
        ds = dst[t] + carry
        r_t, z_t = gates[t, :, :h], gates[t, :, h:]
        c_t, sp = cand[t], states[t]
        da_h = ds * (1.0 - z_t) * (1.0 - c_t * c_t)
        da_r = da_h * m[t] * r_t * (1.0 - r_t)
        da_z = ds * (sp - c_t) * z_t * (1.0 - z_t)
        dgx[t, :, :h] = da_r
        dgx[t, :, h : 2 * h] = da_z
        dgx[t, :, 2 * h :] = da_h
        dpre[t, :, : 2 * h] = dgx[t, :, : 2 * h]
        np.multiply(da_h, r_t, out=dpre[t, :, 2 * h :])
        carry = ds * z_t + dpre[t] @ W.T
    dW = _flat2(states[:-1]).T @ _flat2(dpre)
    return dgx.transpose(1, 0, 2), carry, dW


def gru_sequence(xs, s0, params):
    """All hidden states of a GRU run over ``xs`` (``(B, T, d)`` or ``(T, d)``).

    Per step::

        r = sigmoid(x U^r + s W^r + b^r)
        z = sigmoid(x U^z + s W^z + b^z)
        c = tanh(x U^h + r * (s W^h) + b^h)
        s' = z * s + (1 - z) * c
    """
    xs = np.asarray(xs, dtype=np.float64)
    d, h = _gru_shapes(params)
    single = xs.ndim == 2
    if single:
        xs = xs[None]
        s0 = np.asarray(s0, dtype=np.float64)[None]
    if xs.ndim != 3 or xs.shape[-1] != d or xs.shape[1] < 1:
        raise ShapeMismatch(f"GRU input {xs.shape} does not match input width {d}")
    U = stack_gates(params, "U")
    gx = xs @ U + stack_gates(params, "b")
    states, rcache = gru_recurrence(gx, np.asarray(s0, dtype=np.float64), stack_gates(params, "W"))
    if single:
        states = states[0]
    return states, (xs, U, rcache, single)


def gru_sequence_backward(dstates, cache):
    """Returns ``(dxs, ds0, grads)`` with ``grads`` keyed like the parameters."""
    xs, U, rcache, single = cache
    if single:
        dstates = dstates[None]
    dgx, ds0, dW = gru_recurrence_backward(dstates, rcache)
    dU = _flat2(xs).T @ _flat2(dgx)
    db = _flat2(dgx).sum(axis=0)
    dxs = dgx @ U.T
    h = dW.shape[0]
    grads = {}
    for i, g in enumerate(GRU_GATES):
        sl = slice(i * h, (i + 1) * h)
        grads[f"U{g}"], grads[f"W{g}"], grads[f"b{g}"] = dU[:, sl], dW[:, sl], db[sl]
    if single:
        dxs, ds0 = dxs[0], ds0[0]
    return dxs, ds0, grads


def gru_cell(x, s_prev, params):
    """One GRU step; ``x`` is ``(d,)`` or ``(B, d)``."""
    x = np.asarray(x, dtype=np.float64)
    states, cache = gru_sequence(x[..., None, :], s_prev, params)
    return states[..., 0, :], cache


def gru_cell_backward(ds, cache):
    dxs, ds_prev, grads = gru_sequence_backward(ds[..., None, :], cache)
    return dxs[..., 0, :], ds_prev, grads


# --- pooling / loss --------------------------------------------------------


def maxpool_time(hs):
    """Max over the time axis (second to last). Ties go to the earliest step."""
    hs = np.asarray(hs, dtype=np.float64)
    if hs.ndim < 2 or hs.shape[-2] < 1:
        raise ShapeMismatch(f"maxpool_time needs (..., T, h) input, got {hs.shape}")
    idx = np.argmax(hs, axis=-2)
    out = np.take_along_axis(hs, idx[..., None, :], axis=-2)[..., 0, :]
    return out, (idx, hs.shape)


def maxpool_time_backward(dy, cache):
    idx, shape = cache
    dhs = np.zeros(shape)
    np.put_along_axis(dhs, idx[..., None, :], dy[..., None, :], axis=-2)
    return dhs


def mse(pred, target):
    """Mean of squared differences over every element."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), diff


def mse_backward(diff, dloss=1.0):
    return dloss * 2.0 * diff / diff.size


# --- parameters and optimizer ----------------------------------------------


@dataclass
class ParamSet:
    """Named parameter tensors with gradients of matching shape."""

    values: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, value):
        self.values[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self):
        return list(self.values)

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.values.items()}

    def set_grads(self, grads):
        for k, g in grads.items():
            if k not in self.values:
                raise KeyError(f"gradient for unknown parameter {k!r}")
            if g.shape != self.values[k].shape:
                raise ShapeMismatch(f"gradient {k!r} has shape {g.shape}, parameter {self.values[k].shape}")
        self.grads = dict(grads)

    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.values.items()}, {k: g.copy() for k, g in self.grads.items()})

    def subset(self, prefix) -> dict:
        """Parameters under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix)}


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    """Moment estimates and hyperparameters for :func:`adam_step`."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: ParamSet, **hyper):
        state = cls(**hyper)
        state.m = {k: np.zeros_like(p) for k, p in params.values.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.values.items()}
        return state


def adam_step(params: ParamSet, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params`` and ``state``."""
    for k, p in params.values.items():
        if k not in state.m or state.m[k].shape != p.shape or state.v[k].shape != p.shape:
            raise UninitializedState(f"optimizer state has no moments for {k!r}")
        if k not in params.grads:
            raise UninitializedState(f"no gradient for {k!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.values.items():
        g = params.grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- gradient checking -------------------------------------------------------


def finite_diff_grad(f, params: ParamSet, eps: float = 1e-6, names=None) -> dict:
    """Central-difference estimate of ``df/dparams``; ``f`` maps a ParamSet to a float."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    out = {}
    for k in names or params.names():
        p = params.values[k]
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f(params)
            flat[i] = old - eps
            fm = f(params)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[k] = g
    return out


def relative_error(a, b) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm; 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
