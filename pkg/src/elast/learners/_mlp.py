"""Feed-forward network with hand-written backpropagation.

The networks here are small (two hidden layers of a few dozen units) and are
trained full-batch, so plain numpy is fast enough and keeps every derivative
explicit.  Activations are SiLU, which is smooth; the estimators differentiate
fitted functions with respect to their inputs, so piecewise-linear units would
give discontinuous derivatives.

Full-batch training on a few thousand rows is dominated by elementwise passes
over ``n x width`` arrays, so the forward/backward code writes into buffers
held by a :class:`Workspace` instead of allocating fresh temporaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..exceptions import DivergenceError

Params = list  # [(W0, b0), (W1, b1), ...]


def init_params(sizes: tuple[int, ...], rng: np.random.Generator) -> Params:
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out))
        params.append((W, np.zeros(fan_out)))
    # zero output layer: training starts from the constant (target-mean) fit,
    # which is also what early stopping falls back to on pure-noise targets
    W, b = params[-1]
    params[-1] = (np.zeros_like(W), b)
    return params


class Workspace:
    """Reusable scratch arrays keyed by purpose."""

    def __init__(self):
        self._buf: dict = {}

    def get(self, key, shape) -> np.ndarray:
        a = self._buf.get(key)
        if a is None or a.shape != shape:
            a = np.empty(shape)
            self._buf[key] = a
        return a


def _sigmoid_into(a: np.ndarray, out: np.ndarray) -> np.ndarray:
    # sigmoid(a) = (1 + tanh(a/2)) / 2, which never overflows
    np.multiply(a, 0.5, out=out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def forward(params: Params, X: np.ndarray, ws: Workspace | None = None, keep: bool = False):
    """Network output, shape ``(n, out_dim)``.

    With ``keep`` the per-layer cache ``(h_in, a, s)`` needed by
    :func:`backward` is returned as well.  The output array lives in ``ws``
    and is overwritten by the next call that uses the same workspace.
    """
    ws = ws or Workspace()
    n = X.shape[0]
    cache = []
    h = X
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        a = ws.get(("a", i), (n, W.shape[1]))
        np.matmul(h, W, out=a)
        a += b
        if i == last:
            return (a, cache) if keep else a
        s = _sigmoid_into(a, ws.get(("s", i), a.shape))
        out = ws.get(("h", i), a.shape)
        np.multiply(a, s, out=out)
        if keep:
            cache.append((h, a, s))
        h = out
    raise AssertionError("unreachable")


def _silu_grad_into(a: np.ndarray, s: np.ndarray, out: np.ndarray) -> np.ndarray:
    # d/da [a * sigmoid(a)] = s * (1 + a * (1 - s))
    np.subtract(1.0, s, out=out)
    out *= a
    out += 1.0
    out *= s
    return out


def backward(params: Params, cache: list, out_grad: np.ndarray, ws: Workspace) -> Params:
    """Parameter gradients given d loss / d output (``out_grad`` may be clobbered)."""
    L = len(params)
    grads = [None] * L
    h_last = ws.get(("h", L - 2), cache[-1][1].shape)
    grads[-1] = (h_last.T @ out_grad, out_grad.sum(axis=0))
    delta = ws.get(("d", L - 2), h_last.shape)
    np.matmul(out_grad, params[-1][0].T, out=delta)
    for i in range(L - 2, -1, -1):
        h_in, a, s = cache[i]
        delta *= _silu_grad_into(a, s, ws.get(("t", i), a.shape))
        grads[i] = (h_in.T @ delta, delta.sum(axis=0))
        if i > 0:
            nxt = ws.get(("d", i - 1), cache[i - 1][1].shape)
            np.matmul(delta, params[i][0].T, out=nxt)
            delta = nxt
    return grads


def value_and_input_grad(params: Params, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scalar-output network value and its gradient w.r.t. every input column."""
    ws = Workspace()
    out, cache = forward(params, X, ws, keep=True)
    value = out[:, 0].copy()
    delta = np.repeat(params[-1][0][:, 0][None, :], X.shape[0], axis=0)
    for i in range(len(params) - 2, -1, -1):
        _, a, s = cache[i]
        delta *= _silu_grad_into(a, s, ws.get(("t", i), a.shape))
        delta = delta @ params[i][0].T
    return value, delta


def n_params(params: Params) -> int:
    return sum(W.size + b.size for W, b in params)


def flatten(params: Params) -> list[dict]:
    return [
        {"W": W.ravel().tolist(), "W_shape": list(W.shape), "b": b.tolist()}
        for W, b in params
    ]


def unflatten(blob: list[dict]) -> Params:
    return [
        (np.asarray(layer["W"], dtype=float).reshape(layer["W_shape"]),
         np.asarray(layer["b"], dtype=float))
        for layer in blob
    ]


def copy_params(params: Params) -> Params:
    return [(W.copy(), b.copy()) for W, b in params]


# ---------------------------------------------------------------------------
# losses: each returns (loss, d loss / d output) for an (n, 1) output

def mse(out: np.ndarray, target: np.ndarray, grad_buf: np.ndarray | None = None):
    r = np.subtract(out, target, out=grad_buf)
    loss = float(np.mean(r * r))
    r *= 2.0 / r.shape[0]
    return loss, r


def logistic(out: np.ndarray, label: np.ndarray, grad_buf: np.ndarray | None = None):
    """Mean binary cross-entropy with logits ``out`` and 0/1 ``label``."""
    loss = float(np.mean(np.logaddexp(0.0, out) - label * out))
    g = _sigmoid_into(out, grad_buf if grad_buf is not None else np.empty_like(out))
    g -= label
    g /= g.shape[0]
    return loss, g


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class TrainTrace:
    epochs: int = 0
    best_epoch: int = 0
    best_val: float = np.inf
    train_losses: list = field(default_factory=list)


def train(
    params: Params,
    loss_grad: Callable[[Params, int], tuple[float, Params]],
    val_loss: Callable[[Params], float],
    *,
    lr: float,
    max_epochs: int,
    patience: int,
    ema: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Params, TrainTrace]:
    """Full-batch Adam with early stopping on a validation loss.

    With ``ema > 0`` the validation loss is computed on an exponential moving
    average of the iterates and the averaged weights are what gets returned;
    this is used for objectives that redraw noise every epoch.
    """
    params = copy_params(params)
    m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
    v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
    avg = copy_params(params) if ema > 0 else None
    trace = TrainTrace()
    # the starting point competes too, so pure-noise targets can keep it
    trace.best_val = float(val_loss(params))
    best = copy_params(params)
    since_best = 0
    for epoch in range(1, max_epochs + 1):
        loss, grads = loss_grad(params, epoch)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
        trace.train_losses.append(float(loss))
        step = lr * np.sqrt(1.0 - beta2 ** epoch) / (1.0 - beta1 ** epoch)
        for (p_pair, g_pair, m_pair, v_pair) in zip(params, grads, m, v):
            for p, g, mm, vv in zip(p_pair, g_pair, m_pair, v_pair):
                mm *= beta1
                mm += (1.0 - beta1) * g
                vv *= beta2
                vv += (1.0 - beta2) * g * g
                p -= step * mm / (np.sqrt(vv) + eps)
        if avg is not None:
            # plain running average until 1/(1-ema) epochs have elapsed
            w = min(ema, 1.0 - 1.0 / epoch)
            for (aW, ab), (W, b) in zip(avg, params):
                aW *= w
                aW += (1.0 - w) * W
                ab *= w
                ab += (1.0 - w) * b
            current = avg
        else:
            current = params
        vl = val_loss(current)
        if not np.isfinite(vl):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        trace.epochs = epoch
        if vl < trace.best_val:
            trace.best_val = float(vl)
            trace.best_epoch = epoch
            best = copy_params(current)
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    return best, trace
