"""
Channel selection: AFE channel embeddings, coarse-grained (channel-level) selection,
the gated residual connection and fine-grained (frame-level) selection.
"""

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from chanfuse.config import CGCSMode
from chanfuse.errors import ShapeError
from chanfuse.kernels import (
    attention_backward,
    attention_forward,
    sigmoid_backward,
    sigmoid_forward,
    softmax_backward,
    softmax_forward,
)
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


class QueryContext(BaseModel):
    """
    Per-utterance queries and keys shared by every selection block.

    a_ref: 1×1×D reference embedding; a_channels: K×1×D channel embeddings;
    x_ref: 1×T×D reference frames; x_channels: K×T×D composite frames.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    a_ref: np.ndarray
    a_channels: np.ndarray
    x_ref: np.ndarray
    x_channels: np.ndarray

    @model_validator(mode="after")
    def _check_shapes(self) -> "QueryContext":
        channels, frames, dim = self.x_channels.shape
        if channels < 1:
            raise ShapeError("query context needs at least one channel")
        if self.a_ref.shape != (1, 1, dim):
            raise ShapeError(f"a_ref must be 1×1×{dim}, got {self.a_ref.shape}")
        if self.a_channels.shape != (channels, 1, dim):
            raise ShapeError(f"a_channels must be {channels}×1×{dim}, got {self.a_channels.shape}")
        if self.x_ref.shape != (1, frames, dim):
            raise ShapeError(f"x_ref must be 1×{frames}×{dim}, got {self.x_ref.shape}")
        return self


# ----------------------------------------------------------------------------
# AFE
# ----------------------------------------------------------------------------


def init_afe(
    store: ParamStore,
    prefix: str,
    input_dim: int,
    hidden: int,
    layers: int,
    model_dim: int,
    rng: np.random.Generator,
) -> None:
    init_gru_stack(store, f"{prefix}.gru", input_dim, hidden, layers, rng)
    init_linear(store, f"{prefix}.proj", 2 * hidden, model_dim, rng)


def afe_forward(store: ParamStore, prefix: str, features: np.ndarray, layers: int):
    """
    Final bidirectional GRU state of each channel, projected to D.

    Args:
        store (ParamStore): Holds `{prefix}.gru.*` and `{prefix}.proj.*`.
        prefix (str): Parameter name prefix.
        features (np.ndarray): K×T×Din frames.
        layers (int): GRU stack depth.

    Returns:
        Tuple of the K×1×D embeddings and the cache.
    """
    if features.ndim != 3 or features.shape[1] < 1:
        raise ShapeError(f"afe: features must be K×T×Din with T >= 1, got {features.shape}")
    _, final, gru_cache = gru_stack_forward(store, f"{prefix}.gru", features, layers)
    embedding, proj_cache = linear_apply(store, f"{prefix}.proj", final)
    return embedding[:, None, :], (gru_cache, proj_cache)


def afe_backward(store: ParamStore, prefix: str, dembedding: np.ndarray, cache) -> np.ndarray:
    gru_cache, proj_cache = cache
    dfinal = linear_accumulate(store, f"{prefix}.proj", dembedding[:, 0, :], proj_cache)
    return gru_stack_backward(store, f"{prefix}.gru", None, dfinal, gru_cache)


# ----------------------------------------------------------------------------
# CGCS
# ----------------------------------------------------------------------------


def init_projection_triple(store: ParamStore, prefix: str, dim: int, rng: np.random.Generator) -> None:
    for role in ("q", "k", "v"):
        init_linear(store, f"{prefix}.{role}", dim, dim, rng)


def cgcs_forward(
    store: ParamStore,
    prefix: str,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mode: CGCSMode = CGCSMode.mix,
):
    """
    Scores whole channels against the reference embedding.

    Args:
        q (np.ndarray): 1×1×D query.
        k (np.ndarray): K×1×D channel keys.
        v (np.ndarray): K×T×D values.
        mode (CGCSMode): `mix` sums channels with the weights, `mask` rescales each channel by K·α.

    Returns:
        Tuple of H (K×T×D), α (K) and the cache.
    """
    channels, _, dim = v.shape
    if q.shape != (1, 1, dim) or k.shape != (channels, 1, dim):
        raise ShapeError(f"cgcs: q {q.shape}, k {k.shape}, v {v.shape} do not match")
    qp, q_cache = linear_apply(store, f"{prefix}.q", q)
    kp, k_cache = linear_apply(store, f"{prefix}.k", k)
    vp, v_cache = linear_apply(store, f"{prefix}.v", v)
    scale = 1.0 / np.sqrt(dim)
    scores = (kp[:, 0, :] @ qp[0, 0]) * scale
    alpha, _ = softmax_forward(scores)
    if CGCSMode(mode) is CGCSMode.mix:
        mixed = np.tensordot(alpha, vp, axes=(0, 0))
        out = np.broadcast_to(mixed, vp.shape).copy()
    else:
        out = channels * alpha[:, None, None] * vp
    return out, alpha, (CGCSMode(mode), qp, kp, vp, alpha, scale, q_cache, k_cache, v_cache)


def cgcs_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache):
    mode, qp, kp, vp, alpha, scale, q_cache, k_cache, v_cache = cache
    channels = vp.shape[0]
    if mode is CGCSMode.mix:
        dmixed = dout.sum(axis=0)
        dalpha = np.tensordot(vp, dmixed, axes=([1, 2], [0, 1]))
        dvp = alpha[:, None, None] * dmixed[None]
    else:
        dalpha = channels * np.sum(dout * vp, axis=(1, 2))
        dvp = channels * alpha[:, None, None] * dout
    dscores = softmax_backward(dalpha, alpha) * scale
    dqp = (dscores @ kp[:, 0, :])[None, None, :]
    dkp = (dscores[:, None] * qp[0, 0][None, :])[:, None, :]
    dq = linear_accumulate(store, f"{prefix}.q", dqp, q_cache)
    dk = linear_accumulate(store, f"{prefix}.k", dkp, k_cache)
    dv = linear_accumulate(store, f"{prefix}.v", dvp, v_cache)
    return dq, dk, dv


# ----------------------------------------------------------------------------
# GRC
# ----------------------------------------------------------------------------


def init_grc(store: ParamStore, prefix: str, dim: int, rng: np.random.Generator) -> None:
    init_linear(store, f"{prefix}.gate", 2 * dim, dim, rng)


def grc_forward(store: ParamStore, prefix: str, x: np.ndarray, h: np.ndarray):
    """out = h + sigmoid([x, h] Wg + bg) ⊙ x."""
    if x.shape != h.shape:
        raise ShapeError(f"grc: x {x.shape} and h {h.shape} differ")
    logits, gate_cache = linear_apply(store, f"{prefix}.gate", np.concatenate([x, h], axis=-1))
    gate, sig_cache = sigmoid_forward(logits)
    return h + gate * x, (x, gate, gate_cache, sig_cache)


def grc_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache):
    x, gate, gate_cache, sig_cache = cache
    dim = x.shape[-1]
    dlogits = sigmoid_backward(dout * x, sig_cache)
    dcat = linear_accumulate(store, f"{prefix}.gate", dlogits, gate_cache)
    dx = dout * gate + dcat[..., :dim]
    dh = dout + dcat[..., dim:]
    return dx, dh


# ----------------------------------------------------------------------------
# FGCS
# ----------------------------------------------------------------------------


def fgcs_forward(store: ParamStore, prefix: str, q: np.ndarray, kv: np.ndarray):
    """
    Temporal cross-attention of every channel against the reference frames.

    Args:
        q (np.ndarray): 1×T×D reference frames, shared by all channels.
        kv (np.ndarray): K×T×D channel frames, used as keys and values.

    Returns:
        Tuple of the K×T×D output, β (K×T×T, rows over key frames) and the cache.
    """
    if q.ndim != 3 or q.shape[0] != 1 or q.shape[2] != kv.shape[2]:
        raise ShapeError(f"fgcs: q {q.shape} does not match kv {kv.shape}")
    qp, q_cache = linear_apply(store, f"{prefix}.q", q)
    kp, k_cache = linear_apply(store, f"{prefix}.k", kv)
    vp, v_cache = linear_apply(store, f"{prefix}.v", kv)
    out, beta, attn_cache = attention_forward(qp, kp, vp)
    return out, beta, (q_cache, k_cache, v_cache, attn_cache)


def fgcs_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache):
    q_cache, k_cache, v_cache, attn_cache = cache
    dqp, dkp, dvp = attention_backward(dout, attn_cache)
    dq = linear_accumulate(store, f"{prefix}.q", dqp, q_cache)
    dkv = linear_accumulate(store, f"{prefix}.k", dkp, k_cache)
    dkv = dkv + linear_accumulate(store, f"{prefix}.v", dvp, v_cache)
    return dq, dkv


# ----------------------------------------------------------------------------
# outer selection and query pooling
# ----------------------------------------------------------------------------


def init_outer_selection(store: ParamStore, prefix: str, dim: int, rng: np.random.Generator) -> None:
    init_projection_triple(store, f"{prefix}.cgcs", dim, rng)
    init_grc(store, f"{prefix}.grc", dim, rng)


def outer_selection_forward(
    store: ParamStore,
    prefix: str,
    ctx: QueryContext,
    mode: CGCSMode = CGCSMode.mix,
    use_grc: bool = True,
):
    """
    X' = grc(X, cgcs(A_ref, A_channels, X)); without the gate X' is the CGCS output.

    Returns X' (K×T×D), α (K) and the cache.
    """
    selected, alpha, cgcs_cache = cgcs_forward(
        store, f"{prefix}.cgcs", ctx.a_ref, ctx.a_channels, ctx.x_channels, mode
    )
    if not use_grc:
        return selected, alpha, (cgcs_cache, None)
    out, grc_cache = grc_forward(store, f"{prefix}.grc", ctx.x_channels, selected)
    return out, alpha, (cgcs_cache, grc_cache)


def outer_selection_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache):
    """Returns gradients for (a_ref, a_channels, x_channels)."""
    cgcs_cache, grc_cache = cache
    dx_direct: Optional[np.ndarray] = None
    dselected = dout
    if grc_cache is not None:
        dx_direct, dselected = grc_backward(store, f"{prefix}.grc", dout, grc_cache)
    da_ref, da_channels, dx = cgcs_backward(store, f"{prefix}.cgcs", dselected, cgcs_cache)
    if dx_direct is not None:
        dx = dx + dx_direct
    return da_ref, da_channels, dx


def mean_pool(x: np.ndarray) -> np.ndarray:
    """Time-mean pooling, K×T×D to K×1×D."""
    return x.mean(axis=1, keepdims=True)


def mean_pool_backward(dpooled: np.ndarray, frames: int) -> np.ndarray:
    return np.repeat(dpooled / frames, frames, axis=1)
