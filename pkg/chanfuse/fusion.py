import logging
from typing import List, Tuple

import numpy as np

from chanfuse.errors import FusionCapacityError, ShapeError
from chanfuse.kernels import (
    conv2d_backward,
    conv2d_forward,
    layer_norm_backward,
    layer_norm_forward,
    prelu_backward,
    prelu_forward,
)
from chanfuse.params import ParamStore

logger = logging.getLogger(__name__)

FUSION_CHANNELS = 10
KERNEL_SIZE = 3
PRELU_INIT = 0.25

# (block, input channels, output channels); decoder inputs include their skip.
BLOCKS: List[Tuple[str, int, int]] = [
    ("enc1", 10, 8),
    ("enc2", 8, 4),
    ("enc3", 4, 2),
    ("bottleneck", 2, 2),
    ("dec1", 4, 4),
    ("dec2", 8, 8),
    ("final", 18, 1),
]


def expand_channels(x: np.ndarray, capacity: int = FUSION_CHANNELS) -> np.ndarray:
    """Cyclic repetition K×T×D to C×T×D: output channel i is input channel i mod K."""
    channels = x.shape[0]
    if channels > capacity:
        raise FusionCapacityError(f"channel count {channels} exceeds fusion capacity C={capacity}")
    if channels < 1:
        raise ShapeError("fusion needs at least one channel")
    return x[np.arange(capacity) % channels]


def expand_channels_backward(dexpanded: np.ndarray, channels: int) -> np.ndarray:
    dx = np.zeros((channels,) + dexpanded.shape[1:])
    np.add.at(dx, np.arange(dexpanded.shape[0]) % channels, dexpanded)
    return dx


# ----------------------------------------------------------------------------
# ConvBlock: conv2d -> layer norm over (T, D) per channel -> PReLU
# ----------------------------------------------------------------------------


def init_conv_block(
    store: ParamStore, prefix: str, cin: int, cout: int, rng: np.random.Generator
) -> None:
    fan = KERNEL_SIZE * KERNEL_SIZE
    limit = np.sqrt(6.0 / (fan * (cin + cout)))
    store.add(f"{prefix}.kernel", rng.uniform(-limit, limit, size=(cout, cin, KERNEL_SIZE, KERNEL_SIZE)))
    store.add(f"{prefix}.gamma", np.ones((cout, 1, 1)))
    store.add(f"{prefix}.beta", np.zeros((cout, 1, 1)))
    store.add(f"{prefix}.slope", np.full((cout, 1, 1), PRELU_INIT))


def conv_block_forward(store: ParamStore, prefix: str, x: np.ndarray):
    conv, conv_cache = conv2d_forward(x, store.value(f"{prefix}.kernel"))
    normed, norm_cache = layer_norm_forward(
        conv, store.value(f"{prefix}.gamma"), store.value(f"{prefix}.beta"), axes=(1, 2)
    )
    out, act_cache = prelu_forward(normed, store.value(f"{prefix}.slope"))
    return out, (conv_cache, norm_cache, act_cache)


def conv_block_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache) -> np.ndarray:
    conv_cache, norm_cache, act_cache = cache
    dnormed, dslope = prelu_backward(dout, act_cache)
    dconv, dgamma, dbeta = layer_norm_backward(dnormed, norm_cache)
    dx, dkernel = conv2d_backward(dconv, conv_cache)
    store.accumulate(f"{prefix}.slope", dslope)
    store.accumulate(f"{prefix}.gamma", dgamma)
    store.accumulate(f"{prefix}.beta", dbeta)
    store.accumulate(f"{prefix}.kernel", dkernel)
    return dx


# ----------------------------------------------------------------------------
# U-Net fusion
# ----------------------------------------------------------------------------


def init_unet_fusion(store: ParamStore, prefix: str, rng: np.random.Generator) -> None:
    for block, cin, cout in BLOCKS:
        init_conv_block(store, f"{prefix}.{block}", cin, cout, rng)


def unet_fuse_forward(store: ParamStore, prefix: str, x: np.ndarray):
    """
    Collapses K×T×D encoder output to T×D.

    Channels are first repeated up to C=10, then run through the encoder path
    10→8→4→2, a 2→2 bottleneck and the decoder path, each decoder block taking
    the matching encoder output concatenated on the channel axis. The final
    block sees the decoder output next to the expanded input and maps to one channel.

    Returns the T×D output and the cache.
    """
    channels = x.shape[0]
    expanded = expand_channels(x)
    e1, c_e1 = conv_block_forward(store, f"{prefix}.enc1", expanded)
    e2, c_e2 = conv_block_forward(store, f"{prefix}.enc2", e1)
    e3, c_e3 = conv_block_forward(store, f"{prefix}.enc3", e2)
    b, c_b = conv_block_forward(store, f"{prefix}.bottleneck", e3)
    d1, c_d1 = conv_block_forward(store, f"{prefix}.dec1", np.concatenate([b, e3]))
    d2, c_d2 = conv_block_forward(store, f"{prefix}.dec2", np.concatenate([d1, e2]))
    out, c_f = conv_block_forward(store, f"{prefix}.final", np.concatenate([d2, expanded]))
    return out[0], (channels, c_e1, c_e2, c_e3, c_b, c_d1, c_d2, c_f)


def unet_fuse_backward(store: ParamStore, prefix: str, dout: np.ndarray, cache) -> np.ndarray:
    channels, c_e1, c_e2, c_e3, c_b, c_d1, c_d2, c_f = cache
    dcat = conv_block_backward(store, f"{prefix}.final", dout[None], c_f)
    dd2, dexpanded = dcat[:8], dcat[8:]
    dcat = conv_block_backward(store, f"{prefix}.dec2", dd2, c_d2)
    dd1, de2 = dcat[:4], dcat[4:]
    dcat = conv_block_backward(store, f"{prefix}.dec1", dd1, c_d1)
    db, de3 = dcat[:2], dcat[2:]
    de3 = de3 + conv_block_backward(store, f"{prefix}.bottleneck", db, c_b)
    de2 = de2 + conv_block_backward(store, f"{prefix}.enc3", de3, c_e3)
    de1 = conv_block_backward(store, f"{prefix}.enc2", de2, c_e2)
    dexpanded = dexpanded + conv_block_backward(store, f"{prefix}.enc1", de1, c_e1)
    return expand_channels_backward(dexpanded, channels)


def mean_fuse(x: np.ndarray) -> np.ndarray:
    """Channel mean, K×T×D to T×D."""
    return x.mean(axis=0)


def mean_fuse_backward(dout: np.ndarray, channels: int) -> np.ndarray:
    return np.repeat(dout[None] / channels, channels, axis=0)
