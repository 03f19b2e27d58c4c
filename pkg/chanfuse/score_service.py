import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

from pydantic import BaseModel

from chanfuse.errors import UsageError
from chanfuse.io_manifest import parse_manifest, write_json
from chanfuse.rover_service import combine_records
from chanfuse.scoring import ScoreReport, format_score_table, parse_hypotheses, score_sessions

logger = logging.getLogger(__name__)


class ScoreResponse(BaseModel):
    """
    Response model with one score report per system and the rendered table.
    """

    reports: List[ScoreReport]
    table: str
    json_path: Optional[str] = None


def score(
    ref_manifest: Union[str, Path],
    hyp_files: Sequence[Union[str, Path]],
    rover: bool = False,
    normalize: bool = True,
    out_json: Optional[Union[str, Path]] = None,
) -> ScoreResponse:
    """
    Scores hypothesis files against the transcripts of a reference manifest.

    Args:
        ref_manifest (Union[str, Path]): Session manifest with oracle segments and transcripts.
        hyp_files (Sequence[Union[str, Path]]): JSON-lines hypotheses, one file per system.
        rover (bool): Combine all systems with ROVER and score only the combination.
        normalize (bool): Lower-case and strip punctuation before alignment.
        out_json (Optional[Union[str, Path]]): Where to write the reports as JSON.

    Returns:
        ScoreResponse: Reports in system order and the aligned text table.
    """
    if not hyp_files:
        raise UsageError("score needs at least one hypothesis file")
    if rover and len(hyp_files) < 2:
        raise UsageError("--rover needs at least two hypothesis files")
    sessions = parse_manifest(ref_manifest)
    systems = [(Path(path).stem, parse_hypotheses(path)) for path in hyp_files]
    if rover:
        systems = [("rover", combine_records([records for _, records in systems]))]
    reports = [score_sessions(sessions, records, system, normalize) for system, records in systems]
    json_path = None
    if out_json is not None:
        json_path = str(write_json([report.model_dump(mode="json") for report in reports], out_json))
    logger.info("Scored %d system(s) over %d session(s)", len(reports), len(sessions))
    return ScoreResponse(reports=reports, table=format_score_table(reports), json_path=json_path)
