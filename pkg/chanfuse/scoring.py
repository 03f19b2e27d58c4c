import json
import logging
import re
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ValidationError

from chanfuse.errors import DataError, ManifestError
from chanfuse.io_manifest import Scenario, SessionManifest

logger = logging.getLogger(__name__)

SCENARIO_COLUMNS: Dict[Scenario, str] = {
    Scenario.chime6: "CHiME-6",
    Scenario.dipco: "DiPCo",
    Scenario.mixer6: "Mixer 6",
    Scenario.synthetic: "Synthetic",
}

_PUNCTUATION = re.compile(r"[^\w\s']+")


def normalize_text(text: str) -> List[str]:
    """Lowercase, drop punctuation except apostrophes, split on whitespace."""
    return _PUNCTUATION.sub(" ", text.lower()).split()


# ----------------------------------------------------------------------------
# WER
# ----------------------------------------------------------------------------


class WERCounts(BaseModel):
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        """Percent; an empty reference counts every error against one word."""
        return 100.0 * self.errors / max(self.ref_words, 1)

    def __add__(self, other: "WERCounts") -> "WERCounts":
        return WERCounts(
            substitutions=self.substitutions + other.substitutions,
            deletions=self.deletions + other.deletions,
            insertions=self.insertions + other.insertions,
            ref_words=self.ref_words + other.ref_words,
        )


def wer(ref: Sequence[str], hyp: Sequence[str]) -> WERCounts:
    """
    Levenshtein alignment with unit costs.

    Among minimum-error alignments the one with the fewest insertions plus deletions
    wins, so a substitution is preferred over an insertion/deletion pair.

    Args:
        ref (Sequence[str]): Reference words.
        hyp (Sequence[str]): Hypothesis words.

    Returns:
        WERCounts: S, D, I and the reference length.
    """
    n, m = len(ref), len(hyp)
    # cell: (errors, insertions + deletions, S, D, I)
    prev = [(j, j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        row = [(i, i, 0, i, 0)]
        for j in range(1, m + 1):
            diag = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                candidates = [diag]
            else:
                candidates = [(diag[0] + 1, diag[1], diag[2] + 1, diag[3], diag[4])]
            up = prev[j]
            candidates.append((up[0] + 1, up[1] + 1, up[2], up[3] + 1, up[4]))
            left = row[j - 1]
            candidates.append((left[0] + 1, left[1] + 1, left[2], left[3], left[4] + 1))
            row.append(min(candidates, key=lambda cell: (cell[0], cell[1])))
        prev = row
    _, _, s, d, ins = prev[m]
    return WERCounts(substitutions=s, deletions=d, insertions=ins, ref_words=n)


# ----------------------------------------------------------------------------
# macro aggregation
# ----------------------------------------------------------------------------


class MacroResult(BaseModel):
    mean: float
    rounded: float


def round_half_up(value: float, digits: int = 1) -> float:
    # 35.5/36.3/28.6 average to 33.4667 and round to 33.5; published macro tables
    # that list 33.4 were rounded from unrounded per-scenario WERs, not from these.
    quantum = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def macro_aggregate(scenario_wers: Sequence[float]) -> MacroResult:
    """
    Unweighted mean of per-scenario WERs, also rounded half-up to one decimal.
    """
    if not scenario_wers:
        raise DataError("macro aggregation needs at least one scenario")
    mean = sum(scenario_wers) / len(scenario_wers)
    return MacroResult(mean=mean, rounded=round_half_up(mean))


# ----------------------------------------------------------------------------
# ROVER
# ----------------------------------------------------------------------------


class SlotEntry(BaseModel):
    word: Optional[str]
    votes: int


class WordTransitionNetwork(BaseModel):
    """
    Ordered slots of competing words; `None` is the empty (epsilon) arc.
    Entries keep the order in which systems introduced them.
    """

    slots: List[List[SlotEntry]] = []
    systems: int = 0

    def vote(self, slot: int, word: Optional[str]) -> None:
        for entry in self.slots[slot]:
            if entry.word == word:
                entry.votes += 1
                return
        self.slots[slot].append(SlotEntry(word=word, votes=1))

    def best_path(self) -> List[str]:
        words = []
        for slot in self.slots:
            best = slot[0]
            for entry in slot[1:]:
                if entry.votes > best.votes:
                    best = entry
            if best.word is not None:
                words.append(best.word)
        return words


def _align_to_network(network: WordTransitionNetwork, hyp: Sequence[str]) -> List[Tuple[str, int, int]]:
    slots = network.slots
    n, m = len(slots), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        present = {entry.word for entry in slots[i - 1]}
        for j in range(1, m + 1):
            match = 0 if hyp[j - 1] in present else 1
            cost[i][j] = min(cost[i - 1][j - 1] + match, cost[i - 1][j] + 1, cost[i][j - 1] + 1)
    ops: List[Tuple[str, int, int]] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            match = 0 if hyp[j - 1] in {entry.word for entry in slots[i - 1]} else 1
            if cost[i][j] == cost[i - 1][j - 1] + match:
                ops.append(("align", i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            ops.append(("skip", i - 1, j))
            i -= 1
        else:
            ops.append(("insert", i, j - 1))
            j -= 1
    ops.reverse()
    return ops


def build_network(hyps: Sequence[Sequence[str]]) -> WordTransitionNetwork:
    network = WordTransitionNetwork()
    for system, hyp in enumerate(hyps):
        if system == 0:
            network.slots = [[SlotEntry(word=word, votes=1)] for word in hyp]
            network.systems = 1
            continue
        offset = 0
        for op, slot, position in _align_to_network(network, hyp):
            if op == "align":
                network.vote(slot + offset, hyp[position])
            elif op == "skip":
                network.vote(slot + offset, None)
            else:
                entries = [SlotEntry(word=hyp[position], votes=1)]
                entries.insert(0, SlotEntry(word=None, votes=system))
                network.slots.insert(slot + offset, entries)
                offset += 1
        network.systems += 1
    return network


def rover_combine(hyps: Sequence[Sequence[str]]) -> List[str]:
    """
    Word-level ROVER by vote count.

    Hypotheses are aligned one by one into a word transition network (match 0,
    mismatch 1, epsilon 1); each slot emits its most-voted entry, ties going to the
    entry added first, and epsilon winners emit nothing.

    Args:
        hyps (Sequence[Sequence[str]]): One word sequence per system, in system order.

    Returns:
        List[str]: The combined word sequence.
    """
    if not hyps:
        raise DataError("ROVER needs at least one hypothesis")
    return build_network(hyps).best_path()


# ----------------------------------------------------------------------------
# hypothesis files and score reports
# ----------------------------------------------------------------------------


class HypothesisRecord(BaseModel):
    session_id: str
    speaker_id: str
    start_s: float
    end_s: float
    text: str

    def key(self) -> Tuple[str, str, int, int]:
        return utterance_key(self.session_id, self.speaker_id, self.start_s, self.end_s)


def utterance_key(session_id: str, speaker_id: str, start_s: float, end_s: float) -> Tuple[str, str, int, int]:
    return session_id, speaker_id, int(round(start_s * 1000)), int(round(end_s * 1000))


def parse_hypotheses(path: Union[str, Path]) -> List[HypothesisRecord]:
    """Reads a JSON-lines hypothesis file; errors carry `path:line:`."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ManifestError(str(path), 0, f"cannot read hypotheses: {e}") from e
    records = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(HypothesisRecord.model_validate(json.loads(line)))
        except json.JSONDecodeError as e:
            raise ManifestError(str(path), line_number, f"invalid JSON: {e.msg}") from e
        except ValidationError as e:
            first = e.errors()[0]
            location = ".".join(str(part) for part in first["loc"]) or "record"
            raise ManifestError(str(path), line_number, f"{location}: {first['msg']}") from e
    return records


def write_hypotheses(records: Sequence[HypothesisRecord], path: Union[str, Path]) -> None:
    Path(path).write_text(
        "".join(json.dumps(record.model_dump()) + "\n" for record in records), encoding="utf-8"
    )


class ScenarioScore(BaseModel):
    counts: WERCounts
    wer: float


class ScoreReport(BaseModel):
    """
    Per-scenario counts and WER, plus the macro average over scenarios.
    """

    system: str
    scenarios: Dict[str, ScenarioScore]
    macro: float
    macro_unrounded: float


def score_sessions(
    sessions: Sequence[SessionManifest],
    hypotheses: Sequence[HypothesisRecord],
    system: str = "system",
    normalize: bool = True,
) -> ScoreReport:
    """
    WER per scenario over oracle segments, with the macro average.

    Segments without a hypothesis count as all deletions; hypotheses without a
    segment are ignored.
    """
    split = normalize_text if normalize else str.split
    by_key = {record.key(): record for record in hypotheses}
    matched = set()
    totals: Dict[Scenario, WERCounts] = {}
    for session in sessions:
        for segment in session.segments:
            if segment.transcript is None:
                continue
            key = utterance_key(segment.session_id, segment.speaker_id, segment.start_s, segment.end_s)
            record = by_key.get(key)
            if record is None:
                logger.warning("No hypothesis for %s/%s %.2f-%.2f", *key[:2], segment.start_s, segment.end_s)
                hyp_words: List[str] = []
            else:
                matched.add(key)
                hyp_words = split(record.text)
            ref_words = split(" ".join(segment.transcript))
            totals[session.scenario] = totals.get(session.scenario, WERCounts()) + wer(ref_words, hyp_words)
    extra = len(by_key) - len(matched)
    if extra:
        logger.warning("%d hypotheses have no reference segment", extra)
    if not totals:
        raise DataError("no reference segments with transcripts")
    ordered = [scenario for scenario in Scenario if scenario in totals]
    macro = macro_aggregate([totals[scenario].wer for scenario in ordered])
    return ScoreReport(
        system=system,
        scenarios={
            scenario.value: ScenarioScore(counts=totals[scenario], wer=totals[scenario].wer)
            for scenario in ordered
        },
        macro=macro.rounded,
        macro_unrounded=macro.mean,
    )


def format_score_table(reports: Sequence[ScoreReport]) -> str:
    """Aligned text table: one row per system, scenario columns then Macro."""
    header = ["System"] + [SCENARIO_COLUMNS[s] for s in (Scenario.chime6, Scenario.dipco, Scenario.mixer6)]
    extra = sorted(
        {key for report in reports for key in report.scenarios}
        - {Scenario.chime6.value, Scenario.dipco.value, Scenario.mixer6.value}
    )
    header += [SCENARIO_COLUMNS[Scenario(key)] for key in extra] + ["Macro"]
    keys = [Scenario.chime6.value, Scenario.dipco.value, Scenario.mixer6.value] + extra
    rows = [header]
    for report in reports:
        row = [report.system]
        for key in keys:
            score = report.scenarios.get(key)
            row.append("-" if score is None else f"{score.wer:.1f}")
        row.append(f"{report.macro:.1f}")
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(row))
        for row in rows
    ]
    return "\n".join(lines) + "\n"
