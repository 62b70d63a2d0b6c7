import logging
import os
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field
from rich.console import Console

from src.pwa.store import ReportStore

DEFAULT_WORKERS = 4


def default_workers() -> int:
    """Worker count from `PWA_WORKERS`, falling back to a small pool."""
    value = os.environ.get("PWA_WORKERS")
    if value is None:
        return DEFAULT_WORKERS
    return max(1, int(value))


class RunContext(BaseModel):
    """Context shared by the runs of one command."""

    logger: logging.Logger = Field(default_factory=lambda: logging.getLogger(__name__))
    console: Console = Field(default_factory=Console)
    store: ReportStore = Field(default_factory=ReportStore)
    output_dir: Path = Field(default=Path("runs"), description="Report directory")
    workers: int = Field(default_factory=default_workers, ge=1)
    deterministic_hash: bool = False

    model_config = ConfigDict(
        arbitrary_types_allowed=True,
        extra="forbid",  # no other fields are allowed to be set
    )
