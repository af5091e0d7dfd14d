"""HTTP service exposing the pipeline stages.

Each endpoint takes the full run configuration plus stage-specific
options and executes synchronously, returning the stage summary.  The
CLI is a thin client of this app; it can also be served standalone with
``gadfit serve`` (uvicorn).
"""

from __future__ import annotations

from typing import List, Literal, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__, runner
from .config import RunConfig
from .errors import GadfitError

app = FastAPI(title="gadfit", version=__version__)


class HealthResponse(BaseModel):
    status: str
    version: str


class ConfigRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)


class CorpusResponse(BaseModel):
    corpus_dir: str
    categories: List[str]
    image_size: int
    train_images: dict
    test_images: dict


class PretrainResponse(BaseModel):
    weights: str
    holdout_accuracy: float
    epochs: int
    classes: int


class MetricAggregate(BaseModel):
    mean: float
    sem: float
    n: int


class EvaluateRequest(ConfigRequest):
    variants: Optional[List[str]] = None
    report_name: str = "evaluation"
    save_models: bool = False


class EvaluateResponse(BaseModel):
    rows: List[dict]
    aggregate: dict
    csv: str
    train_reports: dict = {}


class SegmentRequest(ConfigRequest):
    variant: str = "frozen"


class SegmentResponse(BaseModel):
    variant: str
    heatmaps: dict
    dir: str


class AblateRequest(ConfigRequest):
    axis: Literal["criterion", "augment", "gaussian"] = "criterion"


def _guarded(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except GadfitError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/corpus/generate", response_model=CorpusResponse)
def corpus_generate(req: ConfigRequest) -> CorpusResponse:
    return CorpusResponse(**_guarded(runner.prepare_corpus, req.config))


@app.post("/pretrain", response_model=PretrainResponse)
def pretrain(req: ConfigRequest) -> PretrainResponse:
    return PretrainResponse(**_guarded(runner.run_pretrain, req.config))


@app.post("/fit", response_model=EvaluateResponse)
def fit(req: ConfigRequest) -> EvaluateResponse:
    return EvaluateResponse(**_guarded(runner.run_fit, req.config))


@app.post("/finetune", response_model=EvaluateResponse)
def finetune(req: ConfigRequest) -> EvaluateResponse:
    return EvaluateResponse(**_guarded(runner.run_finetune, req.config))


@app.post("/evaluate", response_model=EvaluateResponse)
def evaluate(req: EvaluateRequest) -> EvaluateResponse:
    return EvaluateResponse(
        **_guarded(
            runner.run_evaluate,
            req.config,
            variants=req.variants,
            report_name=req.report_name,
            save_models=req.save_models,
        )
    )


@app.post("/segment", response_model=SegmentResponse)
def segment(req: SegmentRequest) -> SegmentResponse:
    return SegmentResponse(**_guarded(runner.run_segment, req.config, variant=req.variant))


@app.post("/ablate", response_model=EvaluateResponse)
def ablate(req: AblateRequest) -> EvaluateResponse:
    return EvaluateResponse(**_guarded(runner.run_ablate, req.config, axis=req.axis))
