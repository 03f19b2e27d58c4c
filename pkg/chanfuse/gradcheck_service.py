import logging
from typing import List, Optional, Sequence

from pydantic import BaseModel

from chanfuse.checks import CHECKS, CheckResult, check_names, run_checks
from chanfuse.errors import UsageError

logger = logging.getLogger(__name__)


class GradCheckResponse(BaseModel):
    """
    Response model with the maximum relative error of every requested gradient check.
    """

    results: List[CheckResult]
    passed: bool


def gradcheck(names: Optional[Sequence[str]] = None, seeds: int = 10, first_seed: int = 0) -> GradCheckResponse:
    """
    Compares backward passes with central finite differences.

    Args:
        names (Optional[Sequence[str]]): Check names; all gradient checks when empty.
        seeds (int): Number of random sample points per check.
        first_seed (int): First generator seed.

    Returns:
        GradCheckResponse: One result per check.
    """
    known = check_names()
    unknown = [name for name in names or [] if name not in known]
    if unknown:
        raise UsageError(f"unknown check(s) {', '.join(unknown)}; available: {', '.join(known)}")
    selected = list(names or [check.name for check in CHECKS if check.kind == "gradient"])
    results = run_checks(selected, range(first_seed, first_seed + seeds))
    logger.info("Ran %d gradient checks over %d seeds", len(results), seeds)
    return GradCheckResponse(results=results, passed=all(result.passed for result in results))
