import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from chanfuse.config import RunConfig
from chanfuse.errors import DataError, ReferenceSignalError, WPEFrameError
from chanfuse.io_manifest import MultiChannelWave, SessionManifest, load_session, load_wave
from chanfuse.spectral import ComplexSpectrogram, istft, mel_filterbank, stft

logger = logging.getLogger(__name__)

POWER_FLOOR = 1e-10
WPE_REGULARIZER = 1e-8


class ArrayGroup(BaseModel):
    """
    One recording device through the front-end: raw microphones, WPE output and its beam.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    device_id: str
    wave: MultiChannelWave
    dereverberated: ComplexSpectrogram
    beam: MultiChannelWave

    @model_validator(mode="after")
    def _check_beam(self) -> "ArrayGroup":
        if self.beam.channels != 1 or self.beam.num_samples != self.wave.num_samples:
            raise ValueError(
                f"{self.device_id}: beam must be mono with {self.wave.num_samples} samples"
            )
        return self


class CompositeWave(BaseModel):
    """
    K-channel wave with one beamformed channel per device, in device order.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    wave: MultiChannelWave
    device_ids: List[str]

    @model_validator(mode="after")
    def _check_provenance(self) -> "CompositeWave":
        if len(self.device_ids) != self.wave.channels:
            raise ValueError(
                f"{len(self.device_ids)} device ids for a {self.wave.channels}-channel composite"
            )
        return self

    def provenance(self) -> dict:
        return {str(i): device_id for i, device_id in enumerate(self.device_ids)}


class EVRanking(BaseModel):
    """Envelope-variance scores (max 1.0) and channel order, best first."""

    scores: List[float]
    order: List[int]


class TDOAEstimate(BaseModel):
    delays: List[int]
    peaks: List[float]


# ----------------------------------------------------------------------------
# WPE
# ----------------------------------------------------------------------------


def _tap_matrix(spectra: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """F×K×T spectra to the F×(K·taps)×T stack of delayed frames."""
    bins, channels, frames = spectra.shape
    stacked = np.zeros((bins, channels * taps, frames), dtype=spectra.dtype)
    for k in range(taps):
        d = k + delay
        if d >= frames:
            break
        stacked[:, k * channels : (k + 1) * channels, d:] = spectra[:, :, : frames - d]
    return stacked


def _solve_filters(R: np.ndarray, r: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(R, r)
    except np.linalg.LinAlgError:
        pass
    filters = np.zeros_like(r)
    for f in range(R.shape[0]):
        try:
            filters[f] = np.linalg.solve(R[f], r[f])
        except np.linalg.LinAlgError:
            logger.warning("WPE normal equations singular at bin %d; passing the bin through", f)
    return filters


def wpe_dereverb(
    spec: ComplexSpectrogram,
    taps: int = 10,
    delay: int = 3,
    iterations: int = 3,
) -> ComplexSpectrogram:
    """
    Joint multichannel WPE, solved independently per frequency bin.

    Args:
        spec (ComplexSpectrogram): K×T×F input.
        taps (int): Prediction filter length in frames.
        delay (int): Prediction delay in frames.
        iterations (int): Power/filter re-estimation rounds.

    Returns:
        ComplexSpectrogram: Same shape; predicted late reverberation subtracted.
    """
    frames = spec.frames
    if frames <= delay + taps:
        raise WPEFrameError(f"WPE needs more than {delay + taps} frames, got {frames}")
    # F x K x T
    observed = np.transpose(spec.values, (2, 0, 1))
    stacked = _tap_matrix(observed, taps, delay)
    stacked_h = np.conj(np.transpose(stacked, (0, 2, 1)))
    order = stacked.shape[1]
    silent = np.zeros(observed.shape[0], dtype=bool)
    dereverb = observed
    for _ in range(iterations):
        power = np.maximum(np.mean(np.abs(dereverb) ** 2, axis=1), POWER_FLOOR)
        weighted = stacked / power[:, None, :]
        R = weighted @ stacked_h
        r = weighted @ np.conj(np.transpose(observed, (0, 2, 1)))
        trace = np.real(np.trace(R, axis1=1, axis2=2))
        silent = trace <= 0.0
        R = R + (WPE_REGULARIZER * trace / order)[:, None, None] * np.eye(order)
        R[silent] = np.eye(order)
        r[silent] = 0.0
        filters = _solve_filters(R, r)
        dereverb = observed - np.conj(np.transpose(filters, (0, 2, 1))) @ stacked
    if silent.any():
        logger.debug("WPE: %d silent bins passed through", int(silent.sum()))
    return spec.with_values(np.transpose(dereverb, (1, 2, 0)))


# ----------------------------------------------------------------------------
# TDOA and delay-and-sum
# ----------------------------------------------------------------------------


def _lag_order(max_shift: int) -> np.ndarray:
    # 0, 1, -1, 2, -2, ...: argmax keeps the smallest |lag| on ties
    lags = [0]
    for shift in range(1, max_shift + 1):
        lags.extend((shift, -shift))
    return np.array(lags, dtype=np.int64)


def estimate_tdoa(wave: MultiChannelWave, ref: int = 0, max_delay_ms: float = 10.0) -> TDOAEstimate:
    """
    GCC-PHAT delay of every channel against `ref`, with the normalised peak height.

    A positive delay means the channel lags the reference.
    """
    samples = wave.samples
    length = wave.num_samples
    n = 2 * length
    max_shift = min(int(round(max_delay_ms * wave.sample_rate / 1000.0)), length - 1)
    lags = _lag_order(max(max_shift, 0))
    reference = np.fft.rfft(samples[ref], n=n)
    delays, peaks = [], []
    for k in range(wave.channels):
        if k == ref:
            delays.append(0)
            peaks.append(1.0)
            continue
        cross = np.fft.rfft(samples[k], n=n) * np.conj(reference)
        magnitude = np.abs(cross)
        whitened = np.zeros_like(cross)
        nonzero = magnitude > 0
        whitened[nonzero] = cross[nonzero] / magnitude[nonzero]
        cc = np.fft.irfft(whitened, n=n)
        values = cc[lags % n]
        best = int(np.argmax(values))
        delays.append(int(lags[best]))
        peaks.append(float(values[best]))
    return TDOAEstimate(delays=delays, peaks=peaks)


def gcc_phat_tdoa(wave: MultiChannelWave, ref: int = 0, max_delay_ms: float = 10.0) -> List[int]:
    """Integer sample delays per channel; delay[ref] is 0."""
    return estimate_tdoa(wave, ref, max_delay_ms).delays


def _advance(channel: np.ndarray, delay: int) -> np.ndarray:
    out = np.zeros_like(channel)
    if delay >= 0:
        out[: channel.shape[0] - delay] = channel[delay:]
    else:
        out[-delay:] = channel[: channel.shape[0] + delay]
    return out


def delay_and_sum(
    wave: MultiChannelWave,
    max_delay_ms: float = 10.0,
    min_peak: float = 0.1,
) -> MultiChannelWave:
    """
    Aligns every channel to channel 0 by its GCC-PHAT delay and averages them.

    Channels whose PHAT peak falls below `min_peak` are summed unshifted.
    """
    if wave.channels == 1:
        return wave
    estimate = estimate_tdoa(wave, 0, max_delay_ms)
    aligned = []
    for k, (delay, peak) in enumerate(zip(estimate.delays, estimate.peaks)):
        if peak < min_peak:
            if delay != 0:
                logger.info("Channel %d: PHAT peak %.3f below %.3f, ignoring delay %d", k, peak, min_peak, delay)
            delay = 0
        aligned.append(_advance(wave.samples[k], delay))
    beam = np.mean(np.stack(aligned), axis=0, keepdims=True)
    return MultiChannelWave(sample_rate=wave.sample_rate, samples=beam)


# ----------------------------------------------------------------------------
# composite construction
# ----------------------------------------------------------------------------


def enhance_device(device_id: str, wave: MultiChannelWave, config: RunConfig) -> ArrayGroup:
    """
    WPE over the device's microphones jointly, then delay-and-sum down to one channel.
    """
    spec = stft(wave, config.window_ms, config.hop_ms, config.nfft)
    dereverberated = wpe_dereverb(spec, config.wpe_taps, config.wpe_delay, config.wpe_iterations)
    restored = istft(dereverberated)
    if restored.channels == 1:
        beam = restored
    else:
        beam = delay_and_sum(restored, config.tdoa_max_delay_ms, config.tdoa_min_peak)
    logger.info("Device %s: %d microphone(s) -> 1 channel", device_id, wave.channels)
    return ArrayGroup(device_id=device_id, wave=wave, dereverberated=dereverberated, beam=beam)


def composite_from_devices(
    devices: Sequence[Tuple[str, MultiChannelWave]],
    config: RunConfig,
) -> CompositeWave:
    """
    Stacks one enhanced channel per device. Devices run on `config.jobs` threads;
    results are collected in device order.
    """
    if not devices:
        raise DataError("session has no devices")
    rates = {wave.sample_rate for _, wave in devices}
    if len(rates) != 1:
        raise DataError(f"devices use different sample rates {sorted(rates)}")
    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            groups = list(pool.map(lambda item: enhance_device(item[0], item[1], config), devices))
    else:
        groups = [enhance_device(device_id, wave, config) for device_id, wave in devices]
    samples = np.concatenate([group.beam.samples for group in groups], axis=0)
    return CompositeWave(
        wave=MultiChannelWave(sample_rate=groups[0].beam.sample_rate, samples=samples),
        device_ids=[group.device_id for group in groups],
    )


def build_composite(session: SessionManifest, config: Optional[RunConfig] = None) -> CompositeWave:
    """
    Runs the front-end over every device of a session.

    Args:
        session (SessionManifest): Session whose device files are loaded.
        config (Optional[RunConfig]): STFT, WPE and beamforming settings.

    Returns:
        CompositeWave: K = number of devices.
    """
    config = config or RunConfig()
    devices = load_session(session, config.allow_any_rate)
    logger.info("Session %s: building a %d-channel composite", session.session_id, len(devices))
    return composite_from_devices(devices, config)


# ----------------------------------------------------------------------------
# envelope-variance ranking
# ----------------------------------------------------------------------------


def envelope_variance_scores(
    wave: MultiChannelWave,
    bands: int = 24,
    window_ms: float = 32.0,
    hop_ms: float = 16.0,
    nfft: int = 512,
) -> np.ndarray:
    spec = stft(wave, window_ms, hop_ms, nfft)
    filters = mel_filterbank(wave.sample_rate, nfft, bands)
    # K x T x B
    envelopes = np.cbrt((np.abs(spec.values) ** 2) @ filters.T)
    means = envelopes.mean(axis=1, keepdims=True)
    active = means > 0.0
    normalized = np.where(active, envelopes / np.where(active, means, 1.0), 0.0)
    return normalized.var(axis=1).sum(axis=1)


def envelope_variance_rank(wave: MultiChannelWave, bands: int = 24, **stft_params) -> EVRanking:
    """
    Ranks channels by the summed variance of mean-normalised cube-root mel envelopes.

    Reverberation and stationary noise flatten envelopes, so cleaner channels score higher.
    """
    scores = envelope_variance_scores(wave, bands, **stft_params)
    top = float(np.max(scores))
    if top <= 0.0:
        logger.warning("Envelope-variance ranking on silent input; all channels score 1.0")
        scores = np.ones_like(scores)
    else:
        scores = scores / top
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    return EVRanking(scores=[float(s) for s in scores], order=order)


# ----------------------------------------------------------------------------
# reference signal slot
# ----------------------------------------------------------------------------


def reference_signal(
    composite: CompositeWave,
    override_path: Optional[Union[str, Path]] = None,
    config: Optional[RunConfig] = None,
) -> MultiChannelWave:
    """
    The single-channel target for channel selection.

    Args:
        composite (CompositeWave): Enhanced composite of the session.
        override_path (Optional[Union[str, Path]]): Externally separated (GSS) mono file.
        config (Optional[RunConfig]): Beamforming settings for the fallback.

    Returns:
        MultiChannelWave: The override as read, else delay-and-sum over the composite.
    """
    config = config or RunConfig()
    if override_path is not None:
        try:
            reference = load_wave(override_path, config.allow_any_rate)
        except DataError as e:
            raise ReferenceSignalError(f"cannot read reference signal {override_path}: {e}") from e
        if reference.channels != 1:
            raise ReferenceSignalError(
                f"reference signal {override_path} has {reference.channels} channels, expected 1"
            )
        return reference
    return delay_and_sum(composite.wave, config.tdoa_max_delay_ms, config.tdoa_min_peak)
