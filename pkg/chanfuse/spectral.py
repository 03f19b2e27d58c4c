import logging
import warnings
from functools import lru_cache
from typing import Tuple

import librosa
import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.signal import check_COLA, get_window

from chanfuse.errors import COLAError, ShapeError, SignalTooShortError
from chanfuse.io_manifest import MultiChannelWave

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
SILENT_MAGNITUDE = 1e-12


def analysis_lengths(sample_rate: int, window_ms: float, hop_ms: float) -> Tuple[int, int]:
    win_len = int(round(window_ms * sample_rate / 1000.0))
    hop_len = int(round(hop_ms * sample_rate / 1000.0))
    if win_len < 1 or hop_len < 1:
        raise ShapeError(f"window {window_ms} ms / hop {hop_ms} ms too short at {sample_rate} Hz")
    return win_len, hop_len


@lru_cache(maxsize=16)
def hann_window(win_len: int) -> np.ndarray:
    # periodic Hann: sums to a constant at 50% overlap
    window = get_window("hann", win_len, fftbins=True)
    window.flags.writeable = False
    return window


class ComplexSpectrogram(BaseModel):
    """
    STFT of a multi-channel wave: channels × frames × bins, complex.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    sample_rate: int
    window_ms: float = 32.0
    hop_ms: float = 16.0
    nfft: int = 512
    num_samples: int

    @model_validator(mode="after")
    def _check_shape(self) -> "ComplexSpectrogram":
        if self.values.ndim != 3:
            raise ValueError(f"spectrogram must be K×T×F, got {self.values.shape}")
        if self.values.shape[2] != self.nfft // 2 + 1:
            raise ValueError(f"F={self.values.shape[2]} does not equal nfft/2+1 for nfft={self.nfft}")
        return self

    @property
    def win_len(self) -> int:
        return analysis_lengths(self.sample_rate, self.window_ms, self.hop_ms)[0]

    @property
    def hop_len(self) -> int:
        return analysis_lengths(self.sample_rate, self.window_ms, self.hop_ms)[1]

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "ComplexSpectrogram":
        return self.model_copy(update={"values": values})


class CosIPDFeatures(BaseModel):
    """cos of the phase difference of every channel against `ref_channel`, K×T×F in [-1, 1]."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    ref_channel: int = 0


class LogMelFeatures(BaseModel):
    """Floored natural-log mel energies, K×T×M."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray


def frame_count(num_samples: int, win_len: int, hop_len: int) -> int:
    return 1 + (num_samples - win_len) // hop_len


def stft(
    wave: MultiChannelWave,
    window_ms: float = 32.0,
    hop_ms: float = 16.0,
    nfft: int = 512,
) -> ComplexSpectrogram:
    """
    Hann-windowed STFT without centre padding; every frame lies fully inside the signal.

    Args:
        wave (MultiChannelWave): Input audio.
        window_ms (float): Window length in milliseconds.
        hop_ms (float): Hop in milliseconds.
        nfft (int): FFT size, at least the window length.

    Returns:
        ComplexSpectrogram: T = 1 + floor((N - win_len) / hop_len) frames, nfft/2 + 1 bins.
    """
    win_len, hop_len = analysis_lengths(wave.sample_rate, window_ms, hop_ms)
    if win_len > nfft:
        raise ShapeError(f"window of {win_len} samples exceeds nfft={nfft}")
    if wave.num_samples < win_len:
        raise SignalTooShortError(
            f"signal of {wave.num_samples} samples is shorter than one {win_len}-sample window"
        )
    frames = np.lib.stride_tricks.sliding_window_view(wave.samples, win_len, axis=1)[:, ::hop_len]
    values = np.fft.rfft(frames * hann_window(win_len), n=nfft, axis=-1)
    return ComplexSpectrogram(
        values=values,
        sample_rate=wave.sample_rate,
        window_ms=window_ms,
        hop_ms=hop_ms,
        nfft=nfft,
        num_samples=wave.num_samples,
    )


def istft(spec: ComplexSpectrogram) -> MultiChannelWave:
    """
    Weighted overlap-add synthesis normalised by the summed squared window.

    Samples no frame covers are zero; the output has the analysed signal's length.
    """
    win_len, hop_len = spec.win_len, spec.hop_len
    window = hann_window(win_len)
    if not check_COLA(window, win_len, win_len - hop_len):
        raise COLAError(f"Hann window of {win_len} with hop {hop_len} is not constant-overlap-add")
    frames = np.fft.irfft(spec.values, n=spec.nfft, axis=-1)[..., :win_len] * window
    length = max(spec.num_samples, (spec.frames - 1) * hop_len + win_len)
    out = np.zeros((spec.channels, length))
    norm = np.zeros(length)
    for t in range(spec.frames):
        start = t * hop_len
        out[:, start : start + win_len] += frames[:, t]
        norm[start : start + win_len] += window**2
    covered = norm > LOG_FLOOR
    out[:, covered] /= norm[covered]
    out[:, ~covered] = 0.0
    return MultiChannelWave(sample_rate=spec.sample_rate, samples=out[:, : spec.num_samples])


def cos_ipd(spec: ComplexSpectrogram, ref_channel: int = 0) -> CosIPDFeatures:
    """
    cos(angle(X_k) - angle(X_ref)) per channel, frame and bin; silent bins are 1.0.
    """
    if not 0 <= ref_channel < spec.channels:
        raise ShapeError(f"ref_channel {ref_channel} outside 0..{spec.channels - 1}")
    values = spec.values
    ref = values[ref_channel : ref_channel + 1]
    magnitude = np.abs(values) * np.abs(ref)
    silent = (np.abs(values) < SILENT_MAGNITUDE) | (np.abs(ref) < SILENT_MAGNITUDE)
    cross = np.real(values * np.conj(ref))
    with np.errstate(divide="ignore", invalid="ignore"):
        cosine = np.where(silent, 1.0, cross / np.where(silent, 1.0, magnitude))
    cosine = np.clip(cosine, -1.0, 1.0)
    cosine[ref_channel] = 1.0
    return CosIPDFeatures(values=cosine, ref_channel=ref_channel)


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, nfft: int, n_mels: int) -> np.ndarray:
    """Triangular HTK-scale filters from 0 Hz to sr/2, M×(nfft/2+1)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        filters = librosa.filters.mel(
            sr=sample_rate,
            n_fft=nfft,
            n_mels=n_mels,
            fmin=0.0,
            fmax=sample_rate / 2.0,
            htk=True,
            norm=None,
            dtype=np.float64,
        )
    empty = int(np.sum(filters.max(axis=1) == 0.0))
    if empty:
        logger.warning("%d of %d mel filters cover no FFT bin at nfft=%d", empty, n_mels, nfft)
    filters.flags.writeable = False
    return filters


def log_mel(spec: ComplexSpectrogram, n_mels: int = 80) -> LogMelFeatures:
    """log(max(mel energy, 1e-10)) of the power spectrum."""
    filters = mel_filterbank(spec.sample_rate, spec.nfft, n_mels)
    power = np.abs(spec.values) ** 2
    energies = power @ filters.T
    return LogMelFeatures(values=np.log(np.maximum(energies, LOG_FLOOR)))


def feature_cmvn(values: np.ndarray) -> np.ndarray:
    """Per-channel mean and variance normalisation over the time axis of K×T×D features."""
    mean = values.mean(axis=1, keepdims=True)
    std = values.std(axis=1, keepdims=True)
    return (values - mean) / np.maximum(std, 1e-8)
