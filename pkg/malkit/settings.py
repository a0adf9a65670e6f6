import os

from pydantic import BaseModel, Field, field_validator


def _threads_from_env() -> int:
    raw = os.environ.get("MALKIT_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


class Settings(BaseModel):
    # Caps the worker pool used for per-class tree fits inside one boosting round.
    threads: int = Field(default_factory=_threads_from_env)
    default_fpr: float = 0.005
    min_count: int = 10
    folds: int = 10
    seed: int = 0
    schema_version: str = "1.0"
    report_dir: str = "reports"

    @field_validator("threads")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        return max(1, v)


settings = Settings()
