import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from pydantic import BaseModel

from chanfuse.config import RunConfig
from chanfuse.enhancement import CompositeWave, build_composite, envelope_variance_rank
from chanfuse.io_manifest import MultiChannelWave, parse_manifest, write_json, write_wave

logger = logging.getLogger(__name__)

PEAK_TARGET = 0.99


class EnhancedSession(BaseModel):
    """
    Files written for one session and its envelope-variance channel order.
    """

    session_id: str
    channels: int
    composite_path: str
    provenance_path: str
    ranking_path: str
    ev_order: List[int]
    gain: float


class EnhanceResponse(BaseModel):
    """
    Response model listing every composite produced from a manifest.
    """

    sessions: List[EnhancedSession]


def limit_peak(composite: CompositeWave) -> Tuple[CompositeWave, float]:
    """Scales the composite by 0.99/peak when its peak exceeds full scale."""
    peak = float(np.max(np.abs(composite.wave.samples)))
    if peak <= 1.0:
        return composite, 1.0
    gain = PEAK_TARGET / peak
    logger.warning("Composite peak %.3f exceeds full scale; scaling by %.4f", peak, gain)
    wave = MultiChannelWave(sample_rate=composite.wave.sample_rate, samples=composite.wave.samples * gain)
    return CompositeWave(wave=wave, device_ids=composite.device_ids), gain


def enhance(manifest: Union[str, Path], out_dir: Union[str, Path], config: RunConfig) -> EnhanceResponse:
    """
    Runs WPE and delay-and-sum over every device of every session in the manifest.

    For session `s`, writes `s.wav` (K-channel composite, one channel per device),
    `s.provenance.json` ({channel index: device id}) and `s.ev.json` (scores and order).

    Args:
        manifest (Union[str, Path]): JSON-lines session manifest.
        out_dir (Union[str, Path]): Output directory, created if missing.
        config (RunConfig): Spectral, WPE, beamforming and worker settings.

    Returns:
        EnhanceResponse: Paths and channel rankings per session.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sessions = []
    for session in parse_manifest(manifest):
        composite, gain = limit_peak(build_composite(session, config))
        ranking = envelope_variance_rank(
            composite.wave, config.ev_bands, window_ms=config.window_ms, hop_ms=config.hop_ms, nfft=config.nfft
        )
        stem = session.session_id
        composite_path = write_wave(composite.wave, out_dir / f"{stem}.wav")
        provenance_path = write_json(composite.provenance(), out_dir / f"{stem}.provenance.json")
        ranking_path = write_json(ranking.model_dump(), out_dir / f"{stem}.ev.json")
        logger.info("Session %s: wrote %s", session.session_id, composite_path)
        sessions.append(
            EnhancedSession(
                session_id=session.session_id,
                channels=composite.wave.channels,
                composite_path=str(composite_path),
                provenance_path=str(provenance_path),
                ranking_path=str(ranking_path),
                ev_order=ranking.order,
                gain=gain,
            )
        )
    return EnhanceResponse(sessions=sessions)
