"""Request and response models for the analysis service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

OutputFormat = Literal["md", "csv", "json"]


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorDetail(BaseModel):
    category: str
    message: str


class ErrorBody(BaseModel):
    error: ErrorDetail


class PrepareRequest(BaseModel):
    """Ingest a raw survey extract into the canonical dataset form.

    Paths are resolved on the machine running the service. Exactly one of
    ``recode`` (inline) or ``recode_config_path`` must be given.
    """

    input_path: str
    recode: Optional[dict] = None
    recode_config_path: Optional[str] = None
    output_path: Optional[str] = None
    delimiter: str = ","
    format: OutputFormat = "md"


class PrepareResponse(BaseModel):
    summary: dict
    rendered: str
    output_path: Optional[str] = None


class CompareRequest(BaseModel):
    """Fit the four-model comparison series on a prepared dataset."""

    dataset_path: str
    method: str = Field(default="laplace", description="laplace or agq:<n>")
    format: OutputFormat = "md"


class CompareResponse(BaseModel):
    report: dict
    rendered: str


class DifRequest(BaseModel):
    """One DIF analysis; the method comes from the URL path.

    ``dataset_path`` feeds mh/lr/mlr; ``matrix_path`` feeds lord (omit it
    to use the bundled Verbal Aggression fixture).
    """

    dataset_path: Optional[str] = None
    matrix_path: Optional[str] = None
    group_column: str = "Gender"
    studied_item: Optional[str] = None
    item_set: Optional[list[str]] = None
    alpha: float = 0.05
    interaction: bool = False
    rule: Literal["wald", "lr"] = "wald"
    method: str = Field(default="laplace", description="mlr estimation method")
    unit_discrimination: bool = False
    format: OutputFormat = "md"


class DifResponse(BaseModel):
    decision: dict
    rendered: str


class SimulateRequest(BaseModel):
    """Run a Monte Carlo study from an inline config or a config file."""

    config: Optional[dict] = None
    config_path: Optional[str] = None
    methods: list[str] = Field(default_factory=lambda: ["mh", "lr", "mlr"])
    alpha: float = 0.05
    seed: Optional[int] = None
    format: OutputFormat = "md"


class SimulateResponse(BaseModel):
    report: dict
    rendered: str
