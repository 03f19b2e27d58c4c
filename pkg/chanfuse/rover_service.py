import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

from pydantic import BaseModel

from chanfuse.errors import UsageError
from chanfuse.scoring import HypothesisRecord, parse_hypotheses, rover_combine, write_hypotheses

logger = logging.getLogger(__name__)


class RoverResponse(BaseModel):
    """
    Response model for a ROVER combination of several hypothesis files.
    """

    path: str
    systems: int
    utterances: int


def combine_records(systems: Sequence[Sequence[HypothesisRecord]]) -> List[HypothesisRecord]:
    """
    Combines per-utterance hypotheses of several systems, in system order.

    Utterances keep the order in which they first appear; a system without a
    hypothesis for an utterance contributes an empty word sequence.
    """
    first: Dict[Tuple[str, str, int, int], HypothesisRecord] = {}
    texts: List[Dict[Tuple[str, str, int, int], str]] = []
    for records in systems:
        by_key = {}
        for record in records:
            first.setdefault(record.key(), record)
            by_key[record.key()] = record.text
        texts.append(by_key)
    combined = []
    for key, record in first.items():
        words = rover_combine([by_key.get(key, "").split() for by_key in texts])
        combined.append(record.model_copy(update={"text": " ".join(words)}))
    return combined


def rover_files(hyp_files: Sequence[Union[str, Path]], out_path: Union[str, Path]) -> RoverResponse:
    """
    Writes the ROVER combination of hypothesis files as a new hypothesis file.

    Args:
        hyp_files (Sequence[Union[str, Path]]): JSON-lines hypotheses, one file per system.
        out_path (Union[str, Path]): Combined JSON-lines output.

    Returns:
        RoverResponse: Output path and counts.
    """
    if len(hyp_files) < 2:
        raise UsageError("rover needs at least two hypothesis files")
    systems = [parse_hypotheses(path) for path in hyp_files]
    combined = combine_records(systems)
    write_hypotheses(combined, out_path)
    logger.info("Combined %d systems over %d utterances", len(systems), len(combined))
    return RoverResponse(path=str(out_path), systems=len(systems), utterances=len(combined))
