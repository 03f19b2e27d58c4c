import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel

from chanfuse.config import RunConfig
from chanfuse.enhancement import CompositeWave, reference_signal
from chanfuse.errors import DataError
from chanfuse.io_manifest import MultiChannelWave, load_wave, read_json
from chanfuse.spectral import ComplexSpectrogram, cos_ipd, feature_cmvn, log_mel, stft
from chanfuse.tensor_container import save_tensors

logger = logging.getLogger(__name__)

FEATURE_AXES = {
    "features": ("channel", "frame", "mel"),
    "ref_features": ("channel", "frame", "mel"),
    "cosipd": ("channel", "frame", "bin"),
}


class FeaturesResponse(BaseModel):
    """
    Response model describing the tensor container written for one composite.
    """

    path: str
    channels: int
    frames: int
    mel_bins: int
    cosipd_bins: int
    reference: str


def _mel_features(spec: ComplexSpectrogram, config: RunConfig) -> np.ndarray:
    values = log_mel(spec, config.n_mels).values
    return feature_cmvn(values) if config.feature_cmvn else values


def extract_features(
    composite: MultiChannelWave, reference: MultiChannelWave, config: RunConfig
) -> Dict[str, np.ndarray]:
    """
    Log-mel features of the composite and the reference, and the composite's cosIPD.

    Both signals are cut to the shorter length first so their frames line up.

    Args:
        composite (MultiChannelWave): K-channel composite.
        reference (MultiChannelWave): Mono reference signal.
        config (RunConfig): STFT, mel and normalisation settings.

    Returns:
        Dict[str, np.ndarray]: `features` (K×T×M), `ref_features` (1×T×M), `cosipd` (K×T×F).
    """
    if reference.sample_rate != composite.sample_rate:
        raise DataError(
            f"reference sample rate {reference.sample_rate} Hz differs from composite {composite.sample_rate} Hz"
        )
    length = min(composite.num_samples, reference.num_samples)
    if length != composite.num_samples or length != reference.num_samples:
        logger.info("Cutting composite and reference to %d samples", length)
    composite = MultiChannelWave(sample_rate=composite.sample_rate, samples=composite.samples[:, :length])
    reference = MultiChannelWave(sample_rate=reference.sample_rate, samples=reference.samples[:, :length])
    spec = stft(composite, config.window_ms, config.hop_ms, config.nfft)
    ref_spec = stft(reference, config.window_ms, config.hop_ms, config.nfft)
    return {
        "features": _mel_features(spec, config),
        "ref_features": _mel_features(ref_spec, config),
        "cosipd": cos_ipd(spec).values,
    }


def _device_ids(composite_path: Path, channels: int) -> List[str]:
    sidecar = composite_path.with_name(f"{composite_path.stem}.provenance.json")
    if sidecar.exists():
        provenance = read_json(sidecar)
        return [provenance.get(str(i), str(i)) for i in range(channels)]
    return [str(i) for i in range(channels)]


def extract(
    composite_path: Union[str, Path],
    out_path: Union[str, Path],
    config: RunConfig,
    gss_ref: Optional[Union[str, Path]] = None,
) -> FeaturesResponse:
    """
    Computes model inputs for one composite and stores them in a tensor container.

    Args:
        composite_path (Union[str, Path]): Composite WAV from the enhance command.
        out_path (Union[str, Path]): Container to write.
        config (RunConfig): Feature settings.
        gss_ref (Optional[Union[str, Path]]): Externally separated mono reference;
            without it the composite's delay-and-sum beam is the reference.

    Returns:
        FeaturesResponse: Shapes of the stored tensors.
    """
    composite_path = Path(composite_path)
    wave = load_wave(composite_path, config.allow_any_rate)
    composite = CompositeWave(wave=wave, device_ids=_device_ids(composite_path, wave.channels))
    reference = reference_signal(composite, gss_ref, config)
    tensors = extract_features(wave, reference, config)
    save_tensors(out_path, tensors, FEATURE_AXES)
    channels, frames, mel_bins = tensors["features"].shape
    return FeaturesResponse(
        path=str(out_path),
        channels=channels,
        frames=frames,
        mel_bins=mel_bins,
        cosipd_bins=tensors["cosipd"].shape[2],
        reference=str(gss_ref) if gss_ref is not None else "delay-and-sum",
    )
