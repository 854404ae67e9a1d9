"""Dense float64 kernels with hand-written reverse-mode gradients.

Every op comes as a ``forward`` returning ``(output, cache)`` and a matching
``*_backward`` that maps an upstream gradient and the cache to gradients of
the inputs.  Arrays carry a leading batch axis where that makes sense; a
single example is just a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64
INIT_SCALE = 0.08
FORGET_BIAS = 1.0


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# affine


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """y = x @ W + b over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0] or W.shape[1:] != b.shape:
        raise ShapeError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b, (x, W)


def affine_backward(dy: np.ndarray, cache):
    x, W = cache
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: np.ndarray, mask: np.ndarray | None = None):
    """Softmax along the last axis, max-shifted.

    ``mask`` (bool, broadcastable) marks admissible entries; the rest get
    probability exactly zero.
    """
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def log_softmax(x: np.ndarray, mask: np.ndarray | None = None):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    return out, np.exp(out)


def log_softmax_backward(dlogp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return dlogp - p * dlogp.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmCellParams:
    """Gate blocks are laid out as [input, forget, output, candidate]."""

    W: np.ndarray  # (input_dim, 4d)
    U: np.ndarray  # (d, 4d)
    b: np.ndarray  # (4d,)

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    def validate(self) -> None:
        d = self.U.shape[0]
        if self.U.shape != (d, 4 * d) or self.W.shape[1] != 4 * d or self.b.shape != (4 * d,):
            raise ShapeError(
                f"inconsistent LSTM params W{self.W.shape} U{self.U.shape} b{self.b.shape}"
            )

    @classmethod
    def init(cls, input_dim: int, d: int, rng: np.random.Generator, scale: float = INIT_SCALE):
        W = rng.uniform(-scale, scale, size=(input_dim, 4 * d))
        U = rng.uniform(-scale, scale, size=(d, 4 * d))
        b = rng.uniform(-scale, scale, size=4 * d)
        b[d : 2 * d] = FORGET_BIAS
        return cls(W, U, b)


def _gates(z: np.ndarray, d: int):
    s = sigmoid(z[..., : 3 * d])
    return s[..., :d], s[..., d : 2 * d], s[..., 2 * d :], np.tanh(z[..., 3 * d :])


def _gate_grads(dh, dc, c_prev, i, f, o, g, tc):
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dc * g * i * (1 - i), dc * c_prev * f * (1 - f), do * o * (1 - o), dc * i * (1 - g * g)], axis=-1
    )
    return dz, dc * f


def lstm_cell(x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, p: LstmCellParams):
    """One LSTM step on a batch; no peepholes."""
    d = p.hidden_dim
    if x.shape[-1] != p.input_dim or h_prev.shape[-1] != d or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_cell: x{x.shape} h{h_prev.shape} c{c_prev.shape} for in={p.input_dim} d={d}"
        )
    i, f, o, g = _gates(x @ p.W + h_prev @ p.U + p.b, d)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc)


def lstm_cell_backward(dh: np.ndarray, dc: np.ndarray, cache, p: LstmCellParams):
    """Returns (dx, dh_prev, dc_prev, dW, dU, db)."""
    x, h_prev, c_prev, i, f, o, g, tc = cache
    dz, dc_prev = _gate_grads(dh, dc, c_prev, i, f, o, g, tc)
    return dz @ p.W.T, dz @ p.U.T, dc_prev, x.T @ dz, h_prev.T @ dz, dz.sum(axis=0)


def lstm_layer(xs: np.ndarray, p: LstmCellParams, h0=None, c0=None):
    """Run one LSTM layer over ``xs`` of shape (B, T, in).

    Same arithmetic as repeated :func:`lstm_cell`, with the input projection
    hoisted out of the time loop.  Returns (H, (h_T, c_T), cache).
    """
    B, T, _ = xs.shape
    d = p.hidden_dim
    if xs.shape[-1] != p.input_dim:
        raise ShapeError(f"lstm_layer: input dim {xs.shape[-1]} != {p.input_dim}")
    h = np.zeros((B, d)) if h0 is None else h0
    c = np.zeros((B, d)) if c0 is None else c0
    xw = xs @ p.W + p.b
    H = np.empty((B, T, d))
    steps = []
    for t in range(T):
        i, f, o, g = _gates(xw[:, t] + h @ p.U, d)
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        H[:, t] = h
        steps.append((h_prev, c_prev, i, f, o, g, tc))
    return H, (h, c), (xs, steps)


def lstm_layer_backward(dH: np.ndarray, cache, p: LstmCellParams, dh_T=None, dc_T=None):
    """Returns (dxs, dh0, dc0, dW, dU, db)."""
    xs, steps = cache
    B, T, _ = xs.shape
    d = p.hidden_dim
    dZ = np.empty((B, T, 4 * d))
    dh = np.zeros((B, d)) if dh_T is None else dh_T
    dc = np.zeros((B, d)) if dc_T is None else dc_T
    dU = np.zeros_like(p.U)
    UT = p.U.T
    for t in reversed(range(T)):
        h_prev, c_prev, i, f, o, g, tc = steps[t]
        dz, dc = _gate_grads(dH[:, t] + dh, dc, c_prev, i, f, o, g, tc)
        dZ[:, t] = dz
        dU += h_prev.T @ dz
        dh = dz @ UT
    dZ2 = dZ.reshape(B * T, 4 * d)
    dW = xs.reshape(B * T, -1).T @ dZ2
    return dZ @ p.W.T, dh, dc, dW, dU, dZ2.sum(axis=0)


# ---------------------------------------------------------------------------
# dropout


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x: np.ndarray, rate: float, training: bool, rng_seed=None):
    """Inverted dropout; identity outside training.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    Returns ``(y, mask)`` where ``mask`` is ``None`` in eval mode.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    mask = dropout_mask(x.shape, rate, rng)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask) -> np.ndarray:
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """``per_param`` holds ``||a - n|| / max(||a||, ||n||)`` for each tensor
    and ``max_rel_error`` is the largest of them.  The elementwise maximum is
    kept for diagnosis; it is dominated by roundoff on entries near zero."""

    max_rel_error: float
    per_param: dict[str, float]
    worst: str | None
    checked: int
    max_elem_error: float = 0.0
    worst_elem: tuple[str, tuple[int, ...]] | None = None

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def gradient_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tol: float | None = None,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(params) -> (loss, grads)`` must be deterministic.  Parameters
    are perturbed in place and restored.
    """
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is not finite: {loss}")
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}

    per_param: dict[str, float] = {}
    worst = worst_elem = None
    overall = elem_max = 0.0
    checked = 0
    for name in names or list(params):
        theta = params[name]
        analytic = grads[name]
        numeric = np.zeros_like(theta)
        it = np.nditer(theta, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = theta[idx]
            theta[idx] = orig + eps
            fp = loss_fn(params)[0]
            theta[idx] = orig - eps
            fm = loss_fn(params)[0]
            theta[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}{idx}")
            numeric[idx] = (fp - fm) / (2 * eps)
            checked += 1
        diff = np.abs(analytic - numeric)
        elem = diff / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        k = np.unravel_index(int(np.argmax(elem)), elem.shape)
        if elem[k] > elem_max:
            elem_max, worst_elem = float(elem[k]), (name, tuple(int(i) for i in k))
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        err = float(np.linalg.norm(analytic - numeric) / scale) if scale > 0 else 0.0
        per_param[name] = err
        if err >= overall:
            overall, worst = err, name
    report = GradCheckReport(overall, per_param, worst, checked, elem_max, worst_elem)
    if tol is not None and not report.passed(tol):
        raise AssertionError(f"gradient check failed: rel err {overall:.3e} in {worst}")
    return report
