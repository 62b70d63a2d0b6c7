"""ReportStore class for collecting run outcomes from worker threads."""

from threading import Lock
from typing import Any

from src.pwa.either import Either, Left, Right
from src.pwa.errors import PwaError


class ReportStore:
    """
    A thread-safe store of run outcomes.

    Outcomes are indexed by seed; each one is an `Either` holding a report or
    the error that stopped the run.
    """

    def __init__(self) -> None:
        self.lock = Lock()
        self.outcomes: dict[int, Either[Any, PwaError]] = {}

    def add(self, seed: int, outcome: Either[Any, PwaError]) -> Either[Any, PwaError]:
        """Record the outcome of one seed and return it."""
        with self.lock:
            self.outcomes[seed] = outcome

        return outcome

    def get(self, seed: int) -> Either[Any, str]:
        """Retrieve the report of a seed, or a message when it is missing or failed."""
        if seed not in self.outcomes:
            return Left(f"Seed {seed} not found in store.")

        outcome = self.outcomes[seed]
        if isinstance(outcome, Left):
            return Left(f"Seed {seed} failed: {outcome.error}")

        assert isinstance(outcome, Right)
        return Right(outcome.value)

    def ordered(self) -> list[tuple[int, Either[Any, PwaError]]]:
        """All outcomes sorted by seed, whatever order the workers finished in."""
        with self.lock:
            return sorted(self.outcomes.items())

    def errors(self) -> list[PwaError]:
        return [o.error for _, o in self.ordered() if isinstance(o, Left)]

    def clear(self) -> "ReportStore":
        """Clear all outcomes in the store."""
        with self.lock:
            self.outcomes.clear()

        return self
