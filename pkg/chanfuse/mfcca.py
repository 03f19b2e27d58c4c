import logging

import numpy as np

from chanfuse.errors import ShapeError
from chanfuse.kernels import attention_backward, attention_forward
from chanfuse.params import (
    ParamStore,
    gru_stack_backward,
    gru_stack_forward,
    init_gru_stack,
    init_linear,
    linear_accumulate,
    linear_apply,
)

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# CFE
# ----------------------------------------------------------------------------


def init_cfe(
    store: ParamStore,
    prefix: str,
    bins: int,
    hidden: int,
    layers: int,
    model_dim: int,
    rng: np.random.Generator,
) -> None:
    init_gru_stack(store, f"{prefix}.gru", bins, hidden, layers, rng)
    init_linear(store, f"{prefix}.proj", 2 * hidden, model_dim, rng)


def cfe_forward(store: ParamStore, prefix: str, cosipd: np.ndarray, frames: int, layers: int):
    """
    Per-channel cosIPD embedding repeated over the main stream's `frames`.

    Args:
        cosipd (np.ndarray): K×T_f×F cosIPD frames at their native frame rate.
        frames (int): T of the feature stream.

    Returns:
        Tuple of the K×T×D embeddings and the cache.
    """
    if cosipd.ndim != 3 or cosipd.shape[1] < 1:
        raise ShapeError(f"cfe: cosIPD must be K×T×F with T >= 1, got {cosipd.shape}")
    _, final, gru_cache = gru_stack_forward(store, f"{prefix}.gru", cosipd, layers)
    embedding, proj_cache = linear_apply(store, f"{prefix}.proj", final)
    repeated = np.repeat(embedding[:, None, :], frames, axis=1)
    return repeated, (gru_cache, proj_cache)


def cfe_backward(store: ParamStore, prefix: str, drepeated: np.ndarray, cache) -> np.ndarray:
    gru_cache, proj_cache = cache
    dfinal = linear_accumulate(store, f"{prefix}.proj", drepeated.sum(axis=1), proj_cache)
    return gru_stack_backward(store, f"{prefix}.gru", None, dfinal, gru_cache)


# ----------------------------------------------------------------------------
# concat projection
# ----------------------------------------------------------------------------


def concat_project_forward(store: ParamStore, prefix: str, h: np.ndarray, c: np.ndarray):
    """Linear map of [h, c] (K×T×2D) back to K×T×D."""
    if h.shape != c.shape:
        raise ShapeError(f"concat_project: h {h.shape} and c {c.shape} differ")
    return linear_apply(store, prefix, np.concatenate([h, c], axis=-1))


def concat_project_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache):
    dcat = linear_accumulate(store, prefix, dout, cache)
    dim = dout.shape[-1]
    return dcat[..., :dim], dcat[..., dim:]


# ----------------------------------------------------------------------------
# multi-frame cross-channel attention
# ----------------------------------------------------------------------------


def init_mfcca(store: ParamStore, prefix: str, dim: int, rng: np.random.Generator) -> None:
    for role in ("q", "k", "v", "o"):
        init_linear(store, f"{prefix}.{role}", dim, dim, rng)


def _context_set(projected: np.ndarray, f_ctx: int, heads: int) -> np.ndarray:
    """
    K×T×D projected keys to T×H×S×dh context sets, S = (2·f_ctx+1)·K ordered by (δ, k').

    Frames outside 1..T are zero vectors.
    """
    channels, frames, dim = projected.shape
    padded = np.pad(projected, ((0, 0), (f_ctx, f_ctx), (0, 0)))
    # K x T x D x W
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * f_ctx + 1, axis=1)
    size = (2 * f_ctx + 1) * channels
    # T x W x K x D -> T x S x H x dh -> T x H x S x dh
    gathered = np.transpose(windows, (1, 3, 0, 2)).reshape(frames, size, heads, dim // heads)
    return np.ascontiguousarray(np.transpose(gathered, (0, 2, 1, 3)))


def _context_set_backward(dset: np.ndarray, channels: int, f_ctx: int) -> np.ndarray:
    frames, heads, size, head_dim = dset.shape
    width = 2 * f_ctx + 1
    # T x H x S x dh -> T x W x K x D
    dwindows = np.transpose(dset, (0, 2, 1, 3)).reshape(frames, width, channels, heads * head_dim)
    dpadded = np.zeros((channels, frames + 2 * f_ctx, heads * head_dim))
    for delta in range(width):
        dpadded[:, delta : delta + frames] += np.transpose(dwindows[:, delta], (1, 0, 2))
    return dpadded[:, f_ctx : f_ctx + frames]


def mfcca_forward(store: ParamStore, prefix: str, x: np.ndarray, f_ctx: int = 2, heads: int = 4):
    """
    Every (k, t) attends over all channels at frames t-f_ctx..t+f_ctx.

    Keys and values outside the utterance are zero vectors; heads split the feature axis.
    The residual connection and layer norm belong to the caller.

    Returns the K×T×D output, the weights (T×H×K×S) and the cache.
    """
    channels, frames, dim = x.shape
    if dim % heads != 0:
        raise ShapeError(f"mfcca: heads={heads} does not divide D={dim}")
    if f_ctx < 0:
        raise ShapeError("mfcca: f_ctx must be >= 0")
    head_dim = dim // heads
    qp, q_cache = linear_apply(store, f"{prefix}.q", x)
    kp, k_cache = linear_apply(store, f"{prefix}.k", x)
    vp, v_cache = linear_apply(store, f"{prefix}.v", x)
    # T x H x K x dh
    queries = np.transpose(qp.reshape(channels, frames, heads, head_dim), (1, 2, 0, 3))
    keys = _context_set(kp, f_ctx, heads)
    values = _context_set(vp, f_ctx, heads)
    attended, weights, attn_cache = attention_forward(queries, keys, values)
    merged = np.transpose(attended, (2, 0, 1, 3)).reshape(channels, frames, dim)
    out, o_cache = linear_apply(store, f"{prefix}.o", merged)
    return out, weights, (q_cache, k_cache, v_cache, attn_cache, o_cache, channels, f_ctx, heads)


def mfcca_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache) -> np.ndarray:
    q_cache, k_cache, v_cache, attn_cache, o_cache, channels, f_ctx, heads = cache
    _, frames, dim = dout.shape
    head_dim = dim // heads
    dmerged = linear_accumulate(store, f"{prefix}.o", dout, o_cache)
    dattended = np.transpose(dmerged.reshape(channels, frames, heads, head_dim), (1, 2, 0, 3))
    dqueries, dkeys, dvalues = attention_backward(dattended, attn_cache)
    dqp = np.transpose(dqueries, (2, 0, 1, 3)).reshape(channels, frames, dim)
    dkp = _context_set_backward(dkeys, channels, f_ctx)
    dvp = _context_set_backward(dvalues, channels, f_ctx)
    dx = linear_accumulate(store, f"{prefix}.q", dqp, q_cache)
    dx = dx + linear_accumulate(store, f"{prefix}.k", dkp, k_cache)
    dx = dx + linear_accumulate(store, f"{prefix}.v", dvp, v_cache)
    return dx
