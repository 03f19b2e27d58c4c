import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pytest
import soundfile as sf

SAMPLE_RATE = 16000


def write_mono(path: Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> Path:
    """Writes float samples in [-1, 1) as a 16-bit PCM WAV."""
    sf.write(str(path), np.asarray(samples, dtype=np.float64), sample_rate, subtype="PCM_16", format="WAV")
    return path


def write_manifest(
    directory: Path,
    devices: Dict[str, List[np.ndarray]],
    session_id: str = "S01",
    scenario: str = "synthetic",
    segments: Optional[List[dict]] = None,
    name: str = "manifest.jsonl",
) -> Path:
    """One-session manifest whose device files are written next to it, under relative names."""
    entries = []
    for device_id, channels in devices.items():
        files = []
        for i, samples in enumerate(channels):
            filename = f"{session_id}_{device_id}_{i}.wav"
            write_mono(directory / filename, samples)
            files.append(filename)
        entries.append({"device_id": device_id, "files": files})
    record = {
        "session_id": session_id,
        "scenario": scenario,
        "devices": entries,
        "segments": segments or [],
    }
    path = directory / name
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")
    return path


def speech_like(rng: np.random.Generator, seconds: float, rate_hz: float = 4.0) -> np.ndarray:
    """White noise under a deep slow amplitude modulation, peak well below full scale."""
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    envelope = 0.5 * (1.0 + np.sin(2 * np.pi * rate_hz * t)) ** 2
    return 0.05 * envelope * rng.normal(size=n)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
