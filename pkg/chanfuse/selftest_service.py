import logging
from typing import List

from pydantic import BaseModel

from chanfuse.checks import CheckResult, run_checks

logger = logging.getLogger(__name__)


class SelfTestResponse(BaseModel):
    """
    Response model listing every gradient check and oracle comparison with its outcome.
    """

    results: List[CheckResult]
    passed: bool
    failed: List[str]


def selftest(seeds: int = 10) -> SelfTestResponse:
    """
    Runs the whole check registry: gradient checks over `seeds` seeds, oracles once.

    Args:
        seeds (int): Random sample points per gradient check.

    Returns:
        SelfTestResponse: Results; `passed` is False when any check exceeds its tolerance.
    """
    results = run_checks(seeds=range(seeds))
    failed = [result.name for result in results if not result.passed]
    if failed:
        logger.warning("Self-test failed: %s", ", ".join(failed))
    return SelfTestResponse(results=results, passed=not failed, failed=failed)
