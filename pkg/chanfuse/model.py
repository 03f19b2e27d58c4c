"""
The channel-selection encoder: input projection, outer CGCS + GRC, L encoder layers,
convolution fusion and the CTC head, with a hand-chained backward pass.
"""

import logging
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from chanfuse.config import EncoderConfig
from chanfuse.errors import ShapeError, ensure_finite
from chanfuse.fusion import (
    init_unet_fusion,
    mean_fuse,
    mean_fuse_backward,
    unet_fuse_backward,
    unet_fuse_forward,
)
from chanfuse.kernels import (
    attention_backward,
    attention_forward,
    layer_norm_backward,
    layer_norm_forward,
    log_softmax_backward,
    log_softmax_forward,
    relu_backward,
    relu_forward,
)
from chanfuse.mfcca import (
    cfe_backward,
    cfe_forward,
    concat_project_backward,
    concat_project_forward,
    init_cfe,
    init_mfcca,
    mfcca_backward,
    mfcca_forward,
)
from chanfuse.params import ParamStore, init_linear, linear_accumulate, linear_apply
from chanfuse.selection import (
    QueryContext,
    afe_backward,
    afe_forward,
    cgcs_backward,
    cgcs_forward,
    fgcs_backward,
    fgcs_forward,
    init_afe,
    init_outer_selection,
    init_projection_triple,
    mean_pool,
    mean_pool_backward,
    outer_selection_backward,
    outer_selection_forward,
)

logger = logging.getLogger(__name__)

LAYER_NORMS = ("ln_cgcs", "ln_fgcs", "ln_mfcca", "ln_mhsa", "ln_ffn")


class LayerAttention(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    alpha: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    mfcca: Optional[np.ndarray] = None


class ForwardTrace(BaseModel):
    """
    Attention maps, fused encoder output and CTC log-probabilities of one utterance.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    outer_alpha: Optional[np.ndarray] = None
    layers: List[LayerAttention]
    fused: np.ndarray
    log_probs: np.ndarray

    def attention_dump(self) -> Dict:
        return {
            "outer": {"alpha": None if self.outer_alpha is None else self.outer_alpha.tolist()},
            "layers": [
                {
                    "alpha": None if layer.alpha is None else layer.alpha.tolist(),
                    "beta": None if layer.beta is None else layer.beta.tolist(),
                }
                for layer in self.layers
            ],
        }


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------


def init_layer_params(
    store: ParamStore, prefix: str, config: EncoderConfig, layer: int, rng: np.random.Generator
) -> None:
    dim = config.d_model
    if config.use_cgcs:
        init_projection_triple(store, f"{prefix}.cgcs", dim, rng)
    if config.fgcs_in_layer(layer):
        init_projection_triple(store, f"{prefix}.fgcs", dim, rng)
    if config.use_cosipd:
        init_linear(store, f"{prefix}.concat", 2 * dim, dim, rng)
    init_mfcca(store, f"{prefix}.mfcca", dim, rng)
    for role in ("q", "k", "v", "o"):
        init_linear(store, f"{prefix}.mhsa.{role}", dim, dim, rng)
    init_linear(store, f"{prefix}.ffn.in", dim, config.ffn_dim, rng)
    init_linear(store, f"{prefix}.ffn.out", config.ffn_dim, dim, rng)
    for norm in LAYER_NORMS:
        store.add(f"{prefix}.{norm}.gamma", np.ones(dim))
        store.add(f"{prefix}.{norm}.beta", np.zeros(dim))


def init_model(config: EncoderConfig, rng: np.random.Generator) -> ParamStore:
    """
    Registers every parameter of the encoder under a unique dotted name.

    Args:
        config (EncoderConfig): Topology and sizes.
        rng (np.random.Generator): Initialisation source.

    Returns:
        ParamStore: Parameters with zeroed gradient slots.
    """
    store = ParamStore()
    dim = config.d_model
    init_linear(store, "input", config.input_dim, dim, rng)
    if config.query_pooling == "afe":
        init_afe(store, "afe", config.input_dim, config.afe_hidden, config.afe_layers, dim, rng)
    if config.use_cgcs:
        init_outer_selection(store, "outer", dim, rng)
    if config.use_cosipd:
        init_cfe(store, "cfe", config.cosipd_bins, config.cfe_hidden, config.cfe_layers, dim, rng)
    for layer in range(config.layers):
        init_layer_params(store, f"layers.{layer}", config, layer, rng)
    if config.fusion == "unet":
        init_unet_fusion(store, "fusion", rng)
    init_linear(store, "ctc", dim, config.vocab_size + 1, rng)
    logger.info(
        "Initialised %d tensors (%d values)", len(store), sum(p.value.size for p in store)
    )
    return store


# ----------------------------------------------------------------------------
# sub-blocks
# ----------------------------------------------------------------------------


def _norm_forward(store: ParamStore, name: str, x: np.ndarray):
    return layer_norm_forward(x, store.value(f"{name}.gamma"), store.value(f"{name}.beta"))


def _norm_backward(store: ParamStore, name: str, dy: np.ndarray, cache) -> np.ndarray:
    dx, dgamma, dbeta = layer_norm_backward(dy, cache)
    store.accumulate(f"{name}.gamma", dgamma)
    store.accumulate(f"{name}.beta", dbeta)
    return dx


def temporal_attention_forward(store: ParamStore, prefix: str, x: np.ndarray, heads: int):
    """Multi-head self-attention over time, each channel separately with shared weights."""
    channels, frames, dim = x.shape
    head_dim = dim // heads
    split = []
    caches = []
    for role in ("q", "k", "v"):
        projected, cache = linear_apply(store, f"{prefix}.{role}", x)
        split.append(np.transpose(projected.reshape(channels, frames, heads, head_dim), (0, 2, 1, 3)))
        caches.append(cache)
    attended, weights, attn_cache = attention_forward(*split)
    merged = np.transpose(attended, (0, 2, 1, 3)).reshape(channels, frames, dim)
    out, o_cache = linear_apply(store, f"{prefix}.o", merged)
    return out, (caches, attn_cache, o_cache, heads)


def temporal_attention_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache) -> np.ndarray:
    caches, attn_cache, o_cache, heads = cache
    channels, frames, dim = dout.shape
    head_dim = dim // heads
    dmerged = linear_accumulate(store, f"{prefix}.o", dout, o_cache)
    dattended = np.transpose(dmerged.reshape(channels, frames, heads, head_dim), (0, 2, 1, 3))
    dx = np.zeros_like(dout)
    for role, dsplit, proj_cache in zip(("q", "k", "v"), attention_backward(dattended, attn_cache), caches):
        dprojected = np.transpose(dsplit, (0, 2, 1, 3)).reshape(channels, frames, dim)
        dx = dx + linear_accumulate(store, f"{prefix}.{role}", dprojected, proj_cache)
    return dx


def feed_forward_forward(store: ParamStore, prefix: str, x: np.ndarray):
    hidden, in_cache = linear_apply(store, f"{prefix}.in", x)
    activated, relu_cache = relu_forward(hidden)
    out, out_cache = linear_apply(store, f"{prefix}.out", activated)
    return out, (in_cache, relu_cache, out_cache)


def feed_forward_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache) -> np.ndarray:
    in_cache, relu_cache, out_cache = cache
    dactivated = linear_accumulate(store, f"{prefix}.out", dout, out_cache)
    return linear_accumulate(store, f"{prefix}.in", relu_backward(dactivated, relu_cache), in_cache)


# ----------------------------------------------------------------------------
# encoder layer
# ----------------------------------------------------------------------------


def encoder_layer_forward(
    store: ParamStore,
    prefix: str,
    h: np.ndarray,
    ctx: QueryContext,
    c: Optional[np.ndarray],
    config: EncoderConfig,
    layer: int = 0,
):
    """
    One post-norm encoder layer: CGCS, FGCS, cosIPD concat, MFCCA, temporal MHSA, FFN.

    Args:
        h (np.ndarray): K×T×D output of the previous layer.
        ctx (QueryContext): Utterance queries and keys.
        c (Optional[np.ndarray]): K×T×D cosIPD embeddings; None without cosIPD.
        config (EncoderConfig): Which blocks are present.
        layer (int): Layer index, for `fgcs_every_layer`.

    Returns:
        Tuple of the K×T×D output, the layer's attention maps and the cache.
    """
    if h.shape != ctx.x_channels.shape[:2] + (config.d_model,):
        raise ShapeError(f"encoder layer: h {h.shape} does not match the query context")
    cache: Dict = {}
    maps = LayerAttention()
    u = h
    if config.use_cgcs:
        selected, maps.alpha, cache["cgcs"] = cgcs_forward(
            store, f"{prefix}.cgcs", ctx.a_ref, ctx.a_channels, u, config.cgcs_mode
        )
        u, cache["ln_cgcs"] = _norm_forward(store, f"{prefix}.ln_cgcs", u + selected)
    if config.fgcs_in_layer(layer):
        attended, maps.beta, cache["fgcs"] = fgcs_forward(store, f"{prefix}.fgcs", ctx.x_ref, u)
        u, cache["ln_fgcs"] = _norm_forward(store, f"{prefix}.ln_fgcs", u + attended)
    if config.use_cosipd:
        if c is None:
            raise ShapeError("encoder layer: cosIPD embeddings required when use_cosipd is set")
        u, cache["concat"] = concat_project_forward(store, f"{prefix}.concat", u, c)
    attended, maps.mfcca, cache["mfcca"] = mfcca_forward(
        store, f"{prefix}.mfcca", u, config.f_ctx, config.heads
    )
    u, cache["ln_mfcca"] = _norm_forward(store, f"{prefix}.ln_mfcca", u + attended)
    attended, cache["mhsa"] = temporal_attention_forward(store, f"{prefix}.mhsa", u, config.heads)
    u, cache["ln_mhsa"] = _norm_forward(store, f"{prefix}.ln_mhsa", u + attended)
    transformed, cache["ffn"] = feed_forward_forward(store, f"{prefix}.ffn", u)
    u, cache["ln_ffn"] = _norm_forward(store, f"{prefix}.ln_ffn", u + transformed)
    return u, maps, cache


def encoder_layer_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache: Dict):
    """
    Returns dL/dh and the context gradients as a dict with keys
    `a_ref`, `a_channels`, `x_ref` and `c` (absent keys mean zero).
    """
    grads: Dict[str, np.ndarray] = {}
    du = _norm_backward(store, f"{prefix}.ln_ffn", dout, cache["ln_ffn"])
    du = du + feed_forward_backward(store, f"{prefix}.ffn", du, cache["ffn"])
    du = _norm_backward(store, f"{prefix}.ln_mhsa", du, cache["ln_mhsa"])
    du = du + temporal_attention_backward(store, f"{prefix}.mhsa", du, cache["mhsa"])
    du = _norm_backward(store, f"{prefix}.ln_mfcca", du, cache["ln_mfcca"])
    du = du + mfcca_backward(store, f"{prefix}.mfcca", du, cache["mfcca"])
    if "concat" in cache:
        du, grads["c"] = concat_project_backward(store, f"{prefix}.concat", du, cache["concat"])
    if "fgcs" in cache:
        du = _norm_backward(store, f"{prefix}.ln_fgcs", du, cache["ln_fgcs"])
        grads["x_ref"], dkv = fgcs_backward(store, f"{prefix}.fgcs", du, cache["fgcs"])
        du = du + dkv
    if "cgcs" in cache:
        du = _norm_backward(store, f"{prefix}.ln_cgcs", du, cache["ln_cgcs"])
        grads["a_ref"], grads["a_channels"], dv = cgcs_backward(
            store, f"{prefix}.cgcs", du, cache["cgcs"]
        )
        du = du + dv
    return du, grads


# ----------------------------------------------------------------------------
# full model
# ----------------------------------------------------------------------------


def _check_streams(features: np.ndarray, ref_features: np.ndarray, cosipd: Optional[np.ndarray], config: EncoderConfig) -> None:
    if features.ndim != 3 or features.shape[2] != config.input_dim:
        raise ShapeError(f"features must be K×T×{config.input_dim}, got {features.shape}")
    if ref_features.shape != (1,) + features.shape[1:]:
        raise ShapeError(f"ref_features {ref_features.shape} must be 1×T×Din matching {features.shape}")
    if config.use_cosipd:
        if cosipd is None or cosipd.ndim != 3:
            raise ShapeError("cosIPD features required when use_cosipd is set")
        if cosipd.shape[0] != features.shape[0] or cosipd.shape[2] != config.cosipd_bins:
            raise ShapeError(
                f"cosIPD {cosipd.shape} must be {features.shape[0]}×T_f×{config.cosipd_bins}"
            )


def encode(
    store: ParamStore,
    config: EncoderConfig,
    features: np.ndarray,
    ref_features: np.ndarray,
    cosipd: Optional[np.ndarray] = None,
):
    """
    Forward pass keeping everything the backward pass needs.

    Returns the ForwardTrace and the cache.
    """
    _check_streams(features, ref_features, cosipd, config)
    channels, frames, _ = features.shape
    cache: Dict = {"channels": channels, "frames": frames}
    x, cache["input"] = linear_apply(store, "input", features)
    x_ref, cache["input_ref"] = linear_apply(store, "input", ref_features)
    if config.query_pooling == "afe":
        a_channels, cache["afe"] = afe_forward(store, "afe", features, config.afe_layers)
        a_ref, cache["afe_ref"] = afe_forward(store, "afe", ref_features, config.afe_layers)
    else:
        a_channels, a_ref = mean_pool(x), mean_pool(x_ref)
    ctx = QueryContext(a_ref=a_ref, a_channels=a_channels, x_ref=x_ref, x_channels=x)
    c = None
    if config.use_cosipd:
        c, cache["cfe"] = cfe_forward(store, "cfe", cosipd, frames, config.cfe_layers)
    outer_alpha = None
    h = x
    if config.use_cgcs:
        h, outer_alpha, cache["outer"] = outer_selection_forward(
            store, "outer", ctx, config.cgcs_mode, config.use_grc
        )
    layer_maps, layer_caches = [], []
    for layer in range(config.layers):
        h, maps, layer_cache = encoder_layer_forward(store, f"layers.{layer}", h, ctx, c, config, layer)
        layer_maps.append(maps)
        layer_caches.append(layer_cache)
    cache["layers"] = layer_caches
    if config.fusion == "unet":
        fused, cache["fusion"] = unet_fuse_forward(store, "fusion", h)
    else:
        fused = mean_fuse(h)
    logits, cache["ctc"] = linear_apply(store, "ctc", fused)
    log_probs, cache["log_softmax"] = log_softmax_forward(logits)
    ensure_finite("log_probs", log_probs)
    trace = ForwardTrace(outer_alpha=outer_alpha, layers=layer_maps, fused=fused, log_probs=log_probs)
    return trace, cache


def model_forward(
    store: ParamStore,
    config: EncoderConfig,
    features: np.ndarray,
    ref_features: np.ndarray,
    cosipd: Optional[np.ndarray] = None,
) -> ForwardTrace:
    """
    Runs the encoder on one utterance.

    Args:
        store (ParamStore): Model parameters (read only here).
        config (EncoderConfig): Topology matching `store`.
        features (np.ndarray): K×T×Din composite features.
        ref_features (np.ndarray): 1×T×Din reference-signal features.
        cosipd (Optional[np.ndarray]): K×T_f×F cosIPD frames.

    Returns:
        ForwardTrace: Attention maps, fused output and T×(V+1) log-probabilities.
    """
    return encode(store, config, features, ref_features, cosipd)[0]


def model_backward(store: ParamStore, config: EncoderConfig, dlog_probs: np.ndarray, cache: Dict) -> None:
    """Accumulates dL/dθ for every parameter given dL/dlog_probs."""
    channels, frames = cache["channels"], cache["frames"]
    dlogits = log_softmax_backward(dlog_probs, cache["log_softmax"])
    dfused = linear_accumulate(store, "ctc", dlogits, cache["ctc"])
    if config.fusion == "unet":
        dh = unet_fuse_backward(store, "fusion", dfused, cache["fusion"])
    else:
        dh = mean_fuse_backward(dfused, channels)
    dim = config.d_model
    ctx_grads = {
        "a_ref": np.zeros((1, 1, dim)),
        "a_channels": np.zeros((channels, 1, dim)),
        "x_ref": np.zeros((1, frames, dim)),
        "c": np.zeros((channels, frames, dim)),
    }
    for layer in reversed(range(config.layers)):
        dh, grads = encoder_layer_backward(store, f"layers.{layer}", dh, cache["layers"][layer])
        for key, grad in grads.items():
            ctx_grads[key] = ctx_grads[key] + grad
    dx = dh
    if config.use_cgcs:
        da_ref, da_channels, dx = outer_selection_backward(store, "outer", dh, cache["outer"])
        ctx_grads["a_ref"] = ctx_grads["a_ref"] + da_ref
        ctx_grads["a_channels"] = ctx_grads["a_channels"] + da_channels
    if config.use_cosipd:
        cfe_backward(store, "cfe", ctx_grads["c"], cache["cfe"])
    dx_ref = ctx_grads["x_ref"]
    if config.query_pooling == "afe":
        afe_backward(store, "afe", ctx_grads["a_channels"], cache["afe"])
        afe_backward(store, "afe", ctx_grads["a_ref"], cache["afe_ref"])
    else:
        dx = dx + mean_pool_backward(ctx_grads["a_channels"], frames)
        dx_ref = dx_ref + mean_pool_backward(ctx_grads["a_ref"], frames)
    linear_accumulate(store, "input", dx, cache["input"])
    linear_accumulate(store, "input", dx_ref, cache["input_ref"])
