import json
import logging
import math
import os
import tempfile
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import soundfile as sf
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from chanfuse.errors import (
    AmplitudeRangeError,
    DataError,
    ManifestError,
    SegmentBoundsError,
    WaveFormatError,
)

logger = logging.getLogger(__name__)

PCM16_SCALE = 32768.0
REQUIRED_SAMPLE_RATE = 16000


class MultiChannelWave(BaseModel):
    """
    Time-domain audio, K channels × N samples at one sample rate.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sample_rate: int
    samples: np.ndarray

    @model_validator(mode="after")
    def _check_samples(self) -> "MultiChannelWave":
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ValueError(f"samples must be K×N with K >= 1, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        return self

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def channel(self, index: int) -> "MultiChannelWave":
        return MultiChannelWave(sample_rate=self.sample_rate, samples=self.samples[index : index + 1])


class Scenario(str, Enum):
    chime6 = "chime6"
    dipco = "dipco"
    mixer6 = "mixer6"
    synthetic = "synthetic"


class UtteranceSegment(BaseModel):
    """
    One oracle-segmented utterance of a session.
    """

    session_id: str
    speaker_id: str
    start_s: float
    end_s: float
    transcript: Optional[List[str]] = None

    @field_validator("transcript", mode="before")
    @classmethod
    def _split_transcript(cls, value: Union[None, str, List[str]]) -> Optional[List[str]]:
        if isinstance(value, str):
            return value.split()
        return value

    @field_validator("transcript")
    @classmethod
    def _check_words(cls, value: Optional[List[str]]) -> Optional[List[str]]:
        for word in value or []:
            if not word or any(ch.isspace() for ch in word):
                raise ValueError(f"invalid word token {word!r}")
        return value

    @model_validator(mode="after")
    def _check_bounds(self) -> "UtteranceSegment":
        if not (0.0 <= self.start_s < self.end_s):
            raise ValueError(f"segment bounds must satisfy 0 <= start_s < end_s, got {self.start_s}, {self.end_s}")
        return self


class DeviceEntry(BaseModel):
    device_id: str
    files: List[str]

    @field_validator("files")
    @classmethod
    def _non_empty(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("device lists no audio files")
        return value


class _SegmentRecord(BaseModel):
    speaker_id: str
    start_s: float
    end_s: float
    transcript: Optional[Union[str, List[str]]] = None


class _SessionRecord(BaseModel):
    session_id: str
    scenario: Scenario
    devices: List[DeviceEntry]
    segments: List[_SegmentRecord] = []

    @field_validator("devices")
    @classmethod
    def _non_empty(cls, value: List[DeviceEntry]) -> List[DeviceEntry]:
        if not value:
            raise ValueError("device list is empty")
        return value


class SessionManifest(BaseModel):
    """
    Devices, oracle segments and transcripts of one recording session.
    """

    session_id: str
    scenario: Scenario
    devices: List[DeviceEntry]
    segments: List[UtteranceSegment]
    source: str = "<memory>"
    line: int = 0


def _format_validation_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or "record"
    return f"{location}: {first['msg']}"


def parse_manifest(path: Union[str, Path]) -> List[SessionManifest]:
    """
    Parses a JSON-lines session manifest.

    Args:
        path (Union[str, Path]): Manifest file; relative audio paths resolve against its directory.

    Returns:
        List[SessionManifest]: Sessions in file order.

    Raises:
        ManifestError: With `path:line:` for unreadable files, bad JSON or missing fields.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(str(path), 0, f"cannot read manifest: {e}") from e
    sessions = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(str(path), line_number, f"invalid JSON: {e.msg}") from e
        if not isinstance(raw, dict):
            raise ManifestError(str(path), line_number, "record is not a JSON object")
        try:
            record = _SessionRecord.model_validate(raw)
            segments = [
                UtteranceSegment(session_id=record.session_id, **segment.model_dump())
                for segment in record.segments
            ]
        except ValidationError as e:
            raise ManifestError(str(path), line_number, _format_validation_error(e)) from e
        devices = [
            DeviceEntry(
                device_id=device.device_id,
                files=[str((path.parent / f) if not Path(f).is_absolute() else Path(f)) for f in device.files],
            )
            for device in record.devices
        ]
        sessions.append(
            SessionManifest(
                session_id=record.session_id,
                scenario=record.scenario,
                devices=devices,
                segments=segments,
                source=str(path),
                line=line_number,
            )
        )
    logger.info("Parsed %d sessions from %s", len(sessions), path)
    return sessions


def _read_pcm16(path: Union[str, Path], allow_any_rate: bool) -> Tuple[int, np.ndarray]:
    path = str(path)
    if not os.path.exists(path):
        raise WaveFormatError(f"missing audio file: {path}")
    try:
        info = sf.info(path)
    except RuntimeError as e:
        raise WaveFormatError(f"unsupported encoding in {path}: {e}") from e
    if info.format != "WAV" or info.subtype != "PCM_16":
        raise WaveFormatError(
            f"unsupported encoding in {path}: {info.format}/{info.subtype}, expected WAV/PCM_16"
        )
    if not allow_any_rate and info.samplerate != REQUIRED_SAMPLE_RATE:
        raise WaveFormatError(
            f"{path}: sample rate {info.samplerate} Hz, expected {REQUIRED_SAMPLE_RATE} Hz"
        )
    data, rate = sf.read(path, dtype="int16", always_2d=True)
    return rate, data.T.astype(np.float64) / PCM16_SCALE


def load_wave_set(paths: Sequence[Union[str, Path]], allow_any_rate: bool = False) -> MultiChannelWave:
    """
    Loads mono PCM16 files as the channels of one wave, truncated to the shortest file.

    Args:
        paths (Sequence[Union[str, Path]]): One mono file per channel, in channel order.
        allow_any_rate (bool): Accept sample rates other than 16 kHz.

    Returns:
        MultiChannelWave: K = len(paths) channels.
    """
    if not paths:
        raise DataError("no audio files given")
    rate = None
    channels = []
    for path in paths:
        file_rate, data = _read_pcm16(path, allow_any_rate)
        if data.shape[0] != 1:
            raise WaveFormatError(f"unsupported encoding in {path}: expected mono, got {data.shape[0]} channels")
        if rate is not None and file_rate != rate:
            raise WaveFormatError(f"{path}: sample rate {file_rate} Hz differs from {rate} Hz")
        rate = file_rate
        channels.append(data[0])
    length = min(c.shape[0] for c in channels)
    if any(c.shape[0] != length for c in channels):
        logger.info("Truncating %d files to %d samples", len(channels), length)
    return MultiChannelWave(sample_rate=rate, samples=np.stack([c[:length] for c in channels]))


def load_wave(path: Union[str, Path], allow_any_rate: bool = False) -> MultiChannelWave:
    """Loads one (possibly multi-channel) PCM16 file."""
    rate, data = _read_pcm16(path, allow_any_rate)
    return MultiChannelWave(sample_rate=rate, samples=data)


def load_session(
    session: SessionManifest, allow_any_rate: bool = False
) -> List[Tuple[str, MultiChannelWave]]:
    """
    Loads every device of a session; all devices are truncated to the shortest one.

    Errors are re-raised as ManifestError positioned at the session's manifest line.
    """
    devices = []
    try:
        for device in session.devices:
            devices.append((device.device_id, load_wave_set(device.files, allow_any_rate)))
    except DataError as e:
        raise ManifestError(session.source, session.line, f"device {device.device_id}: {e}") from e
    rates = {wave.sample_rate for _, wave in devices}
    if len(rates) != 1:
        raise ManifestError(session.source, session.line, f"devices use different sample rates {sorted(rates)}")
    length = min(wave.num_samples for _, wave in devices)
    return [
        (device_id, MultiChannelWave(sample_rate=wave.sample_rate, samples=wave.samples[:, :length]))
        for device_id, wave in devices
    ]


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def segment_bounds(seg: UtteranceSegment, sample_rate: int) -> Tuple[int, int]:
    return _round_half_up(seg.start_s * sample_rate), _round_half_up(seg.end_s * sample_rate)


def cut_segment(wave: MultiChannelWave, seg: UtteranceSegment) -> MultiChannelWave:
    """
    Returns samples [round(start_s·sr), round(end_s·sr)) of every channel.
    """
    start, end = segment_bounds(seg, wave.sample_rate)
    if end > wave.num_samples:
        raise SegmentBoundsError(
            f"segment {seg.start_s}-{seg.end_s}s ends at sample {end}, audio has {wave.num_samples}"
        )
    if end <= start:
        raise SegmentBoundsError(f"segment {seg.start_s}-{seg.end_s}s is empty at {wave.sample_rate} Hz")
    return MultiChannelWave(sample_rate=wave.sample_rate, samples=wave.samples[:, start:end].copy())


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(samples * PCM16_SCALE), -32768, 32767).astype("<i2")


def write_wave(wave: MultiChannelWave, path: Union[str, Path]) -> Path:
    """
    Writes a 16-bit PCM WAV atomically.

    Args:
        wave (MultiChannelWave): Amplitudes must lie in [-1.0, 1.0].
        path (Union[str, Path]): Destination file.

    Returns:
        Path: The written path.
    """
    peak = float(np.max(np.abs(wave.samples))) if wave.samples.size else 0.0
    if peak > 1.0:
        raise AmplitudeRangeError(f"amplitude {peak:.4f} out of range [-1.0, 1.0]")
    path = Path(path)
    tmp = None
    try:
        handle, tmp = tempfile.mkstemp(suffix=".wav", dir=path.parent)
        os.close(handle)
        sf.write(tmp, quantize_pcm16(wave.samples).T, wave.sample_rate, subtype="PCM_16", format="WAV")
        os.replace(tmp, path)
    except (OSError, RuntimeError) as e:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise DataError(f"cannot write {path}: {e}") from e
    return path


def write_json(payload, path: Union[str, Path]) -> Path:
    """Writes `payload` as indented JSON atomically."""
    path = Path(path)
    tmp = None
    try:
        handle, tmp = tempfile.mkstemp(suffix=".json", dir=path.parent)
        with os.fdopen(handle, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except OSError as e:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise DataError(f"cannot write {path}: {e}") from e
    return path


def read_json(path: Union[str, Path]):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e.msg}") from e
