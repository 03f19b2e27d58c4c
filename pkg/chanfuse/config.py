import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from chanfuse.errors import ConfigError

logger = logging.getLogger(__name__)


class CGCSMode(str, Enum):
    mix = "mix"
    mask = "mask"


class EncoderConfig(BaseModel):
    """
    Shape and topology of the channel-selection encoder.

    Full-size models use layers=12, d_model=256, ffn_dim=2048; the defaults are toy scale.
    """

    model_config = ConfigDict(frozen=True)

    input_dim: int = 80
    cosipd_bins: int = 257
    layers: int = 2
    d_model: int = 32
    ffn_dim: int = 64
    heads: int = 4
    f_ctx: int = 2
    cgcs_mode: CGCSMode = CGCSMode.mix
    vocab_size: int = 5
    afe_hidden: int = 16
    afe_layers: int = 2
    cfe_hidden: int = 16
    cfe_layers: int = 1
    fusion: Literal["unet", "mean"] = "unet"
    fusion_channels: int = 10
    use_cgcs: bool = True
    use_grc: bool = True
    use_fgcs: bool = True
    use_cosipd: bool = True
    fgcs_every_layer: bool = True
    query_pooling: Literal["afe", "mean"] = "afe"

    @model_validator(mode="after")
    def _check_topology(self) -> "EncoderConfig":
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads={self.heads} does not divide d_model={self.d_model}")
        if self.f_ctx < 0:
            raise ValueError("f_ctx must be >= 0")
        if self.fusion_channels != 10:
            raise ValueError("fusion_channels is fixed at C=10")
        return self

    def fgcs_in_layer(self, layer: int) -> bool:
        return self.use_fgcs and (self.fgcs_every_layer or layer == 0)


class RunConfig(BaseModel):
    """
    Every tunable of the toolkit. Unknown keys are rejected.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # io / spectral
    sample_rate: int = 16000
    allow_any_rate: bool = False
    window_ms: float = 32.0
    hop_ms: float = 16.0
    nfft: int = 512
    n_mels: int = 80
    feature_cmvn: bool = True

    # enhancement
    wpe_taps: int = 10
    wpe_delay: int = 3
    wpe_iterations: int = 3
    tdoa_max_delay_ms: float = 10.0
    tdoa_min_peak: float = 0.1
    ev_bands: int = 24

    # model
    cgcs_mode: CGCSMode = CGCSMode.mix
    query_pooling: Literal["afe", "mean"] = "afe"
    f_ctx: int = 2
    layers: int = 2
    d_model: int = 32
    ffn_dim: int = 64
    heads: int = 4
    vocab_size: int = 5
    afe_hidden: int = 16
    afe_layers: int = 2
    cfe_hidden: int = 16
    cfe_layers: int = 1
    fusion: Literal["unet", "mean"] = "unet"
    fusion_channels: int = 10
    use_cgcs: bool = True
    use_grc: bool = True
    use_fgcs: bool = True
    use_cosipd: bool = True
    fgcs_every_layer: bool = True

    # scoring
    normalize_text: bool = True

    # runs
    seed: int = 0
    jobs: int = 1
    learning_rate: float = 0.002
    train_steps: int = 50
    afe_learning_rate: float = 0.005
    afe_steps: int = 100
    toy_utterances: int = 20
    toy_channels: int = 3
    toy_frames: int = 30

    @model_validator(mode="after")
    def _check_ranges(self) -> "RunConfig":
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.wpe_taps < 1 or self.wpe_delay < 0 or self.wpe_iterations < 1:
            raise ValueError("invalid WPE parameters")
        return self

    def encoder_config(self, input_dim: int, cosipd_bins: int) -> EncoderConfig:
        return EncoderConfig(
            input_dim=input_dim,
            cosipd_bins=cosipd_bins,
            layers=self.layers,
            d_model=self.d_model,
            ffn_dim=self.ffn_dim,
            heads=self.heads,
            f_ctx=self.f_ctx,
            cgcs_mode=self.cgcs_mode,
            vocab_size=self.vocab_size,
            afe_hidden=self.afe_hidden,
            afe_layers=self.afe_layers,
            cfe_hidden=self.cfe_hidden,
            cfe_layers=self.cfe_layers,
            fusion=self.fusion,
            fusion_channels=self.fusion_channels,
            use_cgcs=self.use_cgcs,
            use_grc=self.use_grc,
            use_fgcs=self.use_fgcs,
            use_cosipd=self.use_cosipd,
            fgcs_every_layer=self.fgcs_every_layer,
            query_pooling=self.query_pooling,
        )


# Ablation variants expressed as configuration overrides.
ABLATION_PRESETS: Dict[str, Dict[str, Any]] = {
    "mfcca": dict(use_cgcs=False, use_grc=False, use_fgcs=False, use_cosipd=False, fusion="mean"),
    "cgcs": dict(use_cgcs=True, use_grc=False, use_fgcs=False, use_cosipd=False, fusion="mean"),
    "cgcs_grc": dict(use_cgcs=True, use_grc=True, use_fgcs=False, use_cosipd=False, fusion="mean"),
    "fgcs": dict(use_cgcs=False, use_grc=False, use_fgcs=True, use_cosipd=False, fusion="mean"),
    "cosipd": dict(use_cgcs=False, use_grc=False, use_fgcs=False, use_cosipd=True, fusion="mean"),
    "unet": dict(use_cgcs=False, use_grc=False, use_fgcs=False, use_cosipd=False, fusion="unet"),
    "all": dict(use_cgcs=True, use_grc=True, use_fgcs=True, use_cosipd=True, fusion="unet"),
}


def parse_override(item: str) -> Dict[str, Any]:
    """
    Parses one `key=value` override; the value is read as a YAML scalar.

    Args:
        item (str): Override text such as `cgcs_mode=mask` or `f_ctx=0`.

    Returns:
        Dict[str, Any]: A single-entry mapping.
    """
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip().replace("-", "_")
    if not key:
        raise ConfigError(f"override '{item}' has an empty key")
    return {key: yaml.safe_load(raw) if raw.strip() else ""}


def load_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[List[str]] = None,
    **flags: Any,
) -> RunConfig:
    """
    Builds a RunConfig from defaults, a flat YAML file, an ablation preset and overrides.

    Args:
        path (Optional[str]): Flat YAML key/value file; missing means defaults only.
        preset (Optional[str]): Name in ABLATION_PRESETS.
        overrides (Optional[List[str]]): `key=value` strings, applied after the file and preset.
        **flags: Dedicated command-line flags; None values are ignored.

    Returns:
        RunConfig: The validated configuration.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        try:
            document = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
        if document is None:
            document = {}
        if not isinstance(document, dict):
            raise ConfigError(f"config file {path} must be a flat key/value mapping")
        for key, value in document.items():
            if isinstance(value, (dict, list)):
                raise ConfigError(f"config key '{key}' must be a scalar")
        values.update(document)
    if preset is not None:
        if preset not in ABLATION_PRESETS:
            raise ConfigError(
                f"unknown preset '{preset}', expected one of {sorted(ABLATION_PRESETS)}"
            )
        values.update(ABLATION_PRESETS[preset])
    for item in overrides or []:
        values.update(parse_override(item))
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        config = RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    logger.debug("Run configuration: %s", config.model_dump())
    return config
