"""
Deterministic forward/backward primitives.

Every `*_forward` returns `(output, cache)` and the matching `*_backward` takes the
upstream gradient and the cache and returns input/parameter gradients. Arrays are
float64 throughout; nothing here keeps state between calls.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.special import expit, logsumexp

from chanfuse.errors import InfeasibleLabelsError, NumericError, ShapeError

logger = logging.getLogger(__name__)

BLANK = 0


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# linear
# ----------------------------------------------------------------------------


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape} do not chain")
    return x @ W + b, (x, W)


def linear_backward(dy: np.ndarray, cache):
    x, W = cache
    din, dout = W.shape
    dx = dy @ W.T
    dW = x.reshape(-1, din).T @ dy.reshape(-1, dout)
    db = dy.reshape(-1, dout).sum(axis=0)
    return dx, dW, db


# ----------------------------------------------------------------------------
# softmax / log-softmax
# ----------------------------------------------------------------------------


def softmax_forward(x: np.ndarray):
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)
    return y, y


def softmax_backward(dy: np.ndarray, cache) -> np.ndarray:
    y = cache
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def log_softmax_forward(x: np.ndarray):
    y = x - logsumexp(x, axis=-1, keepdims=True)
    return y, y


def log_softmax_backward(dy: np.ndarray, cache) -> np.ndarray:
    y = cache
    return dy - np.exp(y) * np.sum(dy, axis=-1, keepdims=True)


# ----------------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------------


def prelu_forward(x: np.ndarray, a: np.ndarray):
    y = np.where(x >= 0, x, a * x)
    return y, (x, a)


def prelu_backward(dy: np.ndarray, cache):
    x, a = cache
    negative = x < 0
    dx = np.where(negative, a * dy, dy)
    da = unbroadcast(np.where(negative, x * dy, 0.0), np.shape(a))
    return dx, da


def sigmoid_forward(x: np.ndarray):
    y = expit(x)
    return y, y


def sigmoid_backward(dy: np.ndarray, cache) -> np.ndarray:
    y = cache
    return dy * y * (1.0 - y)


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x


def relu_backward(dy: np.ndarray, cache) -> np.ndarray:
    return np.where(cache > 0, dy, 0.0)


# ----------------------------------------------------------------------------
# layer norm
# ----------------------------------------------------------------------------


def layer_norm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-5,
    axes: Sequence[int] = (-1,),
):
    """
    Normalises over `axes` (trailing axes), then applies the broadcast affine.
    """
    axes = tuple(axes)
    mu = np.mean(x, axis=axes, keepdims=True)
    centered = x - mu
    var = np.mean(centered**2, axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gamma + beta
    return y, (xhat, inv_std, gamma, np.shape(beta), axes)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv_std, gamma, beta_shape, axes = cache
    count = np.prod([xhat.shape[a] for a in axes])
    dgamma = unbroadcast(dy * xhat, np.shape(gamma))
    dbeta = unbroadcast(dy, beta_shape)
    dxhat = dy * gamma
    dx = (
        inv_std
        / count
        * (
            count * dxhat
            - np.sum(dxhat, axis=axes, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True)
        )
    )
    return dx, dgamma, dbeta


# ----------------------------------------------------------------------------
# conv2d (stride 1, same padding, odd kernels)
# ----------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, kernels: np.ndarray):
    """
    Cross-correlates `x` (Cin×H×W) with `kernels` (Cout×Cin×kh×kw), zero padded to keep H×W.
    """
    cout, cin, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size {kh}x{kw} must be odd")
    if x.ndim != 3 or x.shape[0] != cin:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernels {kernels.shape}")
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    patches = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    y = np.einsum("chwij,ocij->ohw", patches, kernels)
    return y, (patches, kernels, x.shape)


def conv2d_backward(dy: np.ndarray, cache):
    patches, kernels, x_shape = cache
    _, cin, kh, kw = kernels.shape
    _, height, width = x_shape
    dkernels = np.einsum("chwij,ohw->ocij", patches, dy)
    dpadded = np.zeros((cin, height + kh - 1, width + kw - 1))
    for i in range(kh):
        for j in range(kw):
            dpadded[:, i : i + height, j : j + width] += np.einsum(
                "ohw,oc->chw", dy, kernels[:, :, i, j]
            )
    ph, pw = kh // 2, kw // 2
    dx = dpadded[:, ph : ph + height, pw : pw + width]
    return dx, dkernels


# ----------------------------------------------------------------------------
# GRU
# ----------------------------------------------------------------------------


def gru_sequence_forward(
    x: np.ndarray,
    Wx: np.ndarray,
    Uh: np.ndarray,
    b: np.ndarray,
    reverse: bool = False,
):
    """
    Runs a GRU over time with a zero initial state.

    `x` is T×Din or B×T×Din. Returns the hidden states (same leading axes, Dh last),
    the final state (state after the last processed frame) and the cache.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    batch, frames, din = x.shape
    hidden = Uh.shape[0]
    if Wx.shape != (din, 3 * hidden) or b.shape != (3 * hidden,):
        raise ShapeError(f"gru: Wx {Wx.shape}, Uh {Uh.shape}, b {b.shape} for input {x.shape}")
    projected = x @ Wx + b
    states = np.zeros((batch, frames, hidden))
    h = np.zeros((batch, hidden))
    steps = []
    order = range(frames - 1, -1, -1) if reverse else range(frames)
    for t in order:
        a = projected[:, t]
        uzr = h @ Uh[:, : 2 * hidden]
        z = expit(a[:, :hidden] + uzr[:, :hidden])
        r = expit(a[:, hidden : 2 * hidden] + uzr[:, hidden:])
        n = np.tanh(a[:, 2 * hidden :] + (r * h) @ Uh[:, 2 * hidden :])
        steps.append((t, h, z, r, n))
        h = z * h + (1.0 - z) * n
        states[:, t] = h
    cache = (x, Wx, Uh, steps, squeeze)
    if squeeze:
        return states[0], h[0], cache
    return states, h, cache


def gru_sequence_backward(dstates: np.ndarray, dfinal: Optional[np.ndarray], cache):
    x, Wx, Uh, steps, squeeze = cache
    if squeeze:
        dstates = dstates[None]
        dfinal = None if dfinal is None else dfinal[None]
    batch, frames, din = x.shape
    hidden = Uh.shape[0]
    dUh = np.zeros_like(Uh)
    dpre = np.zeros((batch, frames, 3 * hidden))
    dh_next = np.zeros((batch, hidden)) if dfinal is None else dfinal.copy()
    Uzr, Un = Uh[:, : 2 * hidden], Uh[:, 2 * hidden :]
    for t, h_prev, z, r, n in reversed(steps):
        dh = dstates[:, t] + dh_next
        dz = dh * (h_prev - n)
        dn = dh * (1.0 - z)
        dh_prev = dh * z
        dan = dn * (1.0 - n**2)
        drh = dan @ Un.T
        dUh[:, 2 * hidden :] += (r * h_prev).T @ dan
        dr = drh * h_prev
        dh_prev += drh * r
        dzr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=-1)
        dUh[:, : 2 * hidden] += h_prev.T @ dzr
        dh_prev += dzr @ Uzr.T
        dpre[:, t] = np.concatenate([dzr, dan], axis=-1)
        dh_next = dh_prev
    dWx = x.reshape(-1, din).T @ dpre.reshape(-1, 3 * hidden)
    db = dpre.sum(axis=(0, 1))
    dx = dpre @ Wx.T
    if squeeze:
        dx = dx[0]
    return dx, dWx, dUh, db


def bigru_forward(x: np.ndarray, fwd: Tuple[np.ndarray, ...], bwd: Tuple[np.ndarray, ...]):
    """Bidirectional GRU: states and final states are [forward, backward] concatenations."""
    hf, ff, cf = gru_sequence_forward(x, *fwd)
    hb, fb, cb = gru_sequence_forward(x, *bwd, reverse=True)
    hidden = ff.shape[-1]
    states = np.concatenate([hf, hb], axis=-1)
    final = np.concatenate([ff, fb], axis=-1)
    return states, final, (cf, cb, hidden)


def bigru_backward(dstates: np.ndarray, dfinal: Optional[np.ndarray], cache):
    cf, cb, hidden = cache
    split_final = (None, None) if dfinal is None else (dfinal[..., :hidden], dfinal[..., hidden:])
    dxf, *gf = gru_sequence_backward(dstates[..., :hidden], split_final[0], cf)
    dxb, *gb = gru_sequence_backward(dstates[..., hidden:], split_final[1], cb)
    return dxf + dxb, tuple(gf), tuple(gb)


# ----------------------------------------------------------------------------
# CTC
# ----------------------------------------------------------------------------


def _extend_labels(labels: Sequence[int]) -> np.ndarray:
    extended = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    extended[1::2] = labels
    return extended


def ctc_required_frames(labels: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_loss_forward(log_probs: np.ndarray, labels: Sequence[int]):
    """
    Negative log-likelihood of `labels` under frame posteriors `log_probs` (T×(V+1), blank 0).
    """
    frames, classes = log_probs.shape
    labels = [int(l) for l in labels]
    if any(l <= BLANK or l >= classes for l in labels):
        raise ShapeError(f"ctc: labels must lie in 1..{classes - 1}, got {labels}")
    if ctc_required_frames(labels) > frames:
        raise InfeasibleLabelsError(
            f"ctc: {len(labels)} labels need {ctc_required_frames(labels)} frames, only {frames} given"
        )
    extended = _extend_labels(labels)
    states = len(extended)
    skip = np.zeros(states, dtype=bool)
    skip[2:] = (extended[2:] != BLANK) & (extended[2:] != extended[:-2])
    emit = log_probs[:, extended]

    alpha = np.full((frames, states), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, frames):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + emit[t]
    finals = [states - 1, states - 2] if states > 1 else [0]
    log_likelihood = logsumexp(alpha[frames - 1, finals])
    if not np.isfinite(log_likelihood):
        raise NumericError("ctc: label sequence has zero probability")
    return -float(log_likelihood), (alpha, emit, extended, skip, finals, log_likelihood, classes)


def ctc_loss_backward(dloss: float, cache) -> np.ndarray:
    alpha, emit, extended, skip, finals, log_likelihood, classes = cache
    frames, states = alpha.shape
    beta = np.full((frames, states), -np.inf)
    beta[frames - 1, finals] = 0.0
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b
    occupancy = np.exp(alpha + beta - log_likelihood)
    grad = np.zeros((frames, classes))
    for s, symbol in enumerate(extended):
        grad[:, symbol] -= occupancy[:, s]
    return dloss * grad


# ----------------------------------------------------------------------------
# scaled dot-product attention
# ----------------------------------------------------------------------------


def attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """
    softmax(q kᵀ / sqrt(d)) v over the last two axes; leading axes broadcast.

    Returns the attended values, the weights and the cache.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    weights, _ = softmax_forward(scores)
    return weights @ v, weights, (q, k, v, weights, scale)


def attention_backward(dout: np.ndarray, cache):
    q, k, v, weights, scale = cache
    dweights = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(weights, -1, -2) @ dout
    dscores = softmax_backward(dweights, weights) * scale
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return unbroadcast(dq, q.shape), unbroadcast(dk, k.shape), unbroadcast(dv, v.shape)


# ----------------------------------------------------------------------------
# finite-difference gradient check
# ----------------------------------------------------------------------------


class GradCheckReport(BaseModel):
    """
    Outcome of one finite-difference comparison.
    """

    name: str
    max_rel_error: float
    per_input: Dict[str, float]
    coordinates: int
    tolerance: Optional[float] = None
    passed: Optional[bool] = None


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(
    loss_fn: Callable[[], float],
    inputs: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    name: str = "",
    tolerance: Optional[float] = None,
) -> GradCheckReport:
    """
    Compares analytic gradients with central differences, coordinate by coordinate.

    `inputs` maps names to the very arrays `loss_fn` reads; they are perturbed in place
    and restored. With `max_coords`, a random sample of coordinates across all inputs
    is checked instead of every coordinate.

    Args:
        loss_fn (Callable[[], float]): Scalar loss of the current input values.
        inputs (Dict[str, np.ndarray]): Arrays to perturb.
        analytic (Dict[str, np.ndarray]): Analytic gradient for each input.
        h (float): Central-difference step.
        max_coords (Optional[int]): Sample size; None checks every coordinate.
        rng (Optional[np.random.Generator]): Sampler for `max_coords`.
        name (str): Label for the report.
        tolerance (Optional[float]): When given, the report states pass/fail.

    Returns:
        GradCheckReport: Max relative error overall and per input.
    """
    for key, array in inputs.items():
        if not array.flags.c_contiguous:
            raise ShapeError(f"{key}: gradient check inputs must be C-contiguous arrays")
    coords: List[Tuple[str, int]] = [
        (key, i) for key, array in inputs.items() for i in range(array.size)
    ]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]
    per_input: Dict[str, float] = {key: 0.0 for key in inputs}
    for key, i in coords:
        array = inputs[key]
        if analytic[key].shape != array.shape:
            raise ShapeError(f"{key}: analytic gradient shape {analytic[key].shape} != {array.shape}")
        flat = array.reshape(-1)
        original = flat[i]
        flat[i] = original + h
        plus = loss_fn()
        flat[i] = original - h
        minus = loss_fn()
        flat[i] = original
        numeric = (plus - minus) / (2.0 * h)
        err = relative_error(float(analytic[key].reshape(-1)[i]), numeric)
        per_input[key] = max(per_input[key], err)
    worst = max(per_input.values(), default=0.0)
    passed = None if tolerance is None else bool(worst <= tolerance)
    return GradCheckReport(
        name=name,
        max_rel_error=worst,
        per_input=per_input,
        coordinates=len(coords),
        tolerance=tolerance,
        passed=passed,
    )
