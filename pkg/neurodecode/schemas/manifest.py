"""Run manifest schemas."""

from datetime import datetime

from pydantic import BaseModel, Field


class StageRecord(BaseModel):
    """One stage execution: what it read, what it wrote and how long it took."""

    stage: str
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: dict[str, str] = Field(default_factory=dict)
    wall_time_s: float = Field(0.0, ge=0)
    finished_at: datetime | None = None
    tool_version: str


class RunManifest(BaseModel):
    """Every stage of a run directory keyed by stage name, plus the config echo."""

    tool_version: str
    config: dict = Field(default_factory=dict)
    stages: dict[str, StageRecord] = Field(default_factory=dict)

    def output_hashes(self) -> dict[str, str]:
        """Return every recorded output path mapped to its SHA-256."""
        hashes: dict[str, str] = {}
        for record in self.stages.values():
            hashes.update(record.outputs)
        return hashes
