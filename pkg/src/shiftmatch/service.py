"""HTTP service wrapping the experiment pipeline.

The service owns all computation and file io; clients (the bundled CLI or
anything speaking JSON) submit a full experiment configuration per request.
Numeric failures map to 500, configuration problems to 400.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from . import __version__, pipeline
from .errors import ConfigError, FormatError, NumericError, ShiftMatchError, SpecError


class ExperimentConfigModel(BaseModel):
    """Wire mirror of the key=value experiment configuration."""

    model_config = ConfigDict(extra="forbid")

    graph: str = "lenet-s"
    classes: int = 10
    data: str = "glyphs"
    train_size: int = 10000
    test_size: int = 2000
    data_seed: int = 7
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    members: int = 5
    epochs: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 128
    seed: int = 0
    spec: str = "kron"
    placement: str = "pre"
    eps: float = 1e-5
    methods: str = "plain,meanvar,shiftmatch"
    corruptions: str = "blur:4"
    samples: str = "runs/samples"
    out: str = "runs/out"
    theory_samples: int = 50000
    theory_size: int = 8
    theory_alpha: float = 1.5
    theory_cutoff: float = 2.5
    theory_eps: float = 1e-9

    def to_config(self) -> pipeline.ExperimentConfig:
        return pipeline.ExperimentConfig(**self.model_dump())


class TrainRequest(BaseModel):
    config: ExperimentConfigModel


class TrainResponse(BaseModel):
    weight_files: list[str]
    graph_file: str
    clean_accuracy: dict[str, float]
    ms: float


class StatsRequest(BaseModel):
    config: ExperimentConfigModel
    methods: list[str] | None = None


class StatsResponse(BaseModel):
    stats_files: list[str]
    ms: float


class EvalRequest(BaseModel):
    config: ExperimentConfigModel
    methods: list[str] | None = None


class ReportRow(BaseModel):
    method: str
    corruption: str
    intensity: int
    accuracy: float
    nll: float
    examples: int
    ms: float


class EvalResponse(BaseModel):
    rows: list[ReportRow]
    csv_path: str
    json_path: str
    hash_path: str


class TheoryRequest(BaseModel):
    config: ExperimentConfigModel = Field(default_factory=ExperimentConfigModel)


class TheoryRow(BaseModel):
    mode: str
    corruption: str
    error: float
    threshold: float
    passed: bool


class TheoryResponse(BaseModel):
    rows: list[TheoryRow]
    passed: bool
    csv_path: str
    ms: float


class HealthResponse(BaseModel):
    status: str
    version: str


def create_app() -> FastAPI:
    app = FastAPI(title="shiftmatch", version=__version__)

    @app.exception_handler(ShiftMatchError)
    async def shiftmatch_error(request: Request, exc: ShiftMatchError):
        if isinstance(exc, (ConfigError, SpecError, FormatError)):
            status = 400
        elif isinstance(exc, NumericError):
            status = 500
        else:
            status = 500
        return JSONResponse(status_code=status,
                            content={"error": type(exc).__name__, "detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest) -> TrainResponse:
        return TrainResponse(**pipeline.run_train(req.config.to_config()))

    @app.post("/stats", response_model=StatsResponse)
    def stats(req: StatsRequest) -> StatsResponse:
        return StatsResponse(**pipeline.run_stats(req.config.to_config(), req.methods))

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest) -> EvalResponse:
        return EvalResponse(**pipeline.run_eval(req.config.to_config(), req.methods))

    @app.post("/theory", response_model=TheoryResponse)
    def theory(req: TheoryRequest) -> TheoryResponse:
        result = pipeline.run_theory(req.config.to_config())
        return TheoryResponse(rows=result["rows"], passed=result["passed"],
                              csv_path=result["csv_path"], ms=result["ms"])

    return app


app = create_app()
