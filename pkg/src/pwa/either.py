"""Either values for orchestration code that must not raise.

Library functions raise `PwaError` subclasses; the experiment runners catch
them once and hand an `Either` to the CLI, which folds it into an exit code.
"""

from collections.abc import Callable
from dataclasses import dataclass
from typing import Any, Generic, TypeAlias, TypeVar

from src.pwa.errors import PwaError

T = TypeVar("T")  # Success type
E = TypeVar("E")  # Error type
U = TypeVar("U")


@dataclass(frozen=True)
class Left(Generic[E]):
    """Failure branch; chaining stops here."""

    error: E

    def flat_map(self, func: Callable[[Any], Any]) -> "Left[E]":
        return self

    def fold(self, on_left: Callable[[E], U], on_right: Callable[[Any], U]) -> U:
        return on_left(self.error)


@dataclass(frozen=True)
class Right(Generic[T]):
    """Success branch."""

    value: T

    def flat_map(self, func: Callable[[T], U]) -> U:
        """Chain a computation that itself returns an Either."""
        return func(self.value)

    def fold(self, on_left: Callable[[Any], U], on_right: Callable[[T], U]) -> U:
        return on_right(self.value)


Either: TypeAlias = Right[T] | Left[E]


def attempt(func: Callable[..., T], *args: Any, **kwargs: Any) -> Either[T, PwaError]:
    """Run `func` and capture package errors as a Left.

    Validation errors from pydantic and plain `ValueError`s are wrapped in a
    `PwaError` so that callers only ever see one error type on the left.

    Args:
        func: The computation to run
        *args: Positional arguments for `func`
        **kwargs: Keyword arguments for `func`

    Returns:
        Right with the result, or Left with the captured error
    """
    try:
        return Right(func(*args, **kwargs))
    except PwaError as e:
        return Left(e)
    except (ValueError, ArithmeticError, FloatingPointError) as e:
        return Left(PwaError(f"{type(e).__name__}: {e}"))


def exit_code_of(error: PwaError) -> int:
    """Process exit code for a captured error."""
    return error.exit_code
