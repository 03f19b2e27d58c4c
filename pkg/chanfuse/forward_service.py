import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel

from chanfuse.config import RunConfig
from chanfuse.errors import DataError
from chanfuse.io_manifest import write_json
from chanfuse.model import init_model, model_forward
from chanfuse.tensor_container import load_params, load_tensors, save_tensors

logger = logging.getLogger(__name__)


class ForwardResponse(BaseModel):
    """
    Response model for one encoder pass: output container, shapes and attention summary.
    """

    path: str
    channels: int
    frames: int
    classes: int
    outer_alpha: Optional[List[float]] = None
    attention_path: Optional[str] = None
    weights: str


def forward(
    features_path: Union[str, Path],
    out_path: Union[str, Path],
    config: RunConfig,
    weights_path: Optional[Union[str, Path]] = None,
    dump_attention: Optional[Union[str, Path]] = None,
) -> ForwardResponse:
    """
    Runs the channel-selection encoder over a feature container.

    Args:
        features_path (Union[str, Path]): Container with `features`, `ref_features`
            and, when cosIPD is enabled, `cosipd`.
        out_path (Union[str, Path]): Container receiving `log_probs` (T×(V+1)) and `fused` (T×D).
        config (RunConfig): Model topology; `seed` initialises weights when none are given.
        weights_path (Optional[Union[str, Path]]): Trained parameters, e.g. from `train-toy`.
        dump_attention (Optional[Union[str, Path]]): JSON file for the α and β maps.

    Returns:
        ForwardResponse: Output shapes and the outer channel weights.
    """
    tensors = load_tensors(features_path)
    for name in ("features", "ref_features") + (("cosipd",) if config.use_cosipd else ()):
        if name not in tensors:
            raise DataError(f"{features_path}: missing tensor '{name}'")
    features = tensors["features"].astype(np.float64)
    ref_features = tensors["ref_features"].astype(np.float64)
    cosipd = tensors["cosipd"].astype(np.float64) if config.use_cosipd else None
    encoder = config.encoder_config(
        input_dim=features.shape[2], cosipd_bins=cosipd.shape[2] if cosipd is not None else 1
    )
    store = init_model(encoder, np.random.default_rng(config.seed))
    if weights_path is not None:
        load_params(store, weights_path)
    trace = model_forward(store, encoder, features, ref_features, cosipd)
    save_tensors(
        out_path,
        {"log_probs": trace.log_probs, "fused": trace.fused},
        {"log_probs": ("frame", "class"), "fused": ("frame", "feature")},
    )
    attention_path = None
    if dump_attention is not None:
        attention_path = str(write_json(trace.attention_dump(), dump_attention))
    logger.info("Forward pass over %d channels, %d frames", features.shape[0], features.shape[1])
    return ForwardResponse(
        path=str(out_path),
        channels=features.shape[0],
        frames=trace.log_probs.shape[0],
        classes=trace.log_probs.shape[1],
        outer_alpha=None if trace.outer_alpha is None else trace.outer_alpha.tolist(),
        attention_path=attention_path,
        weights=str(weights_path) if weights_path is not None else f"seed {config.seed}",
    )
