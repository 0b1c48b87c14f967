"""HTTP inference service over a trained pipeline.

Serves the read-only surface (prediction and case-study dumps) from
frozen checkpoints, which are safe to share across concurrent requests.
Training and dataset construction stay on the CLI; they are batch jobs.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .errors import FactVqaError
from .runner import Pipeline


class PredictRequest(BaseModel):
    question: str = Field(min_length=1)
    image_id: str = Field(min_length=1)
    question_id: str = ""
    task: str = "open_ended"
    choices: list[str] | None = None


class RankedAnswer(BaseModel):
    answer: str
    score: float


class FactRecord(BaseModel):
    s: str
    r: str
    o: str
    detector_score: float
    attention_weight: float | None


class PredictResponse(BaseModel):
    question_id: str
    answer: str
    answer_rank: list[RankedAnswer]
    visual_weights: list[float] | None
    facts: list[FactRecord]
    used_fallback: bool = False


class CaseStudyRequest(BaseModel):
    question: str = Field(min_length=1)
    image_id: str = Field(min_length=1)
    question_id: str = ""
    top5: bool = False


class CaseStudyResponse(BaseModel):
    question_id: str
    image_id: str
    question: str
    answer: str
    answer_rank: list[RankedAnswer]
    visual_grid: list[list[float]] | None
    facts: list[FactRecord]
    n_facts_displayed: int
    n_facts_generated: int


class HealthResponse(BaseModel):
    status: str
    version: str


class InfoResponse(BaseModel):
    version: str
    variant: str
    k_facts: int
    n_answers: int
    feature_backend: str
    config_hash: str | None


def create_app(pipeline: Pipeline, config_hash: str | None = None) -> FastAPI:
    app = FastAPI(title="factvqa", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.get("/info", response_model=InfoResponse)
    def info():
        return InfoResponse(
            version=__version__,
            variant=pipeline.msan.config.variant,
            k_facts=pipeline.msan.config.k_facts,
            n_answers=len(pipeline.answers),
            feature_backend=pipeline.provider.backend,
            config_hash=config_hash,
        )

    @app.post("/predict", response_model=PredictResponse)
    def predict(request: PredictRequest):
        try:
            record = pipeline.predict(request.question, request.image_id,
                                      question_id=request.question_id,
                                      task=request.task, choices=request.choices)
        except (FactVqaError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        record.setdefault("used_fallback", False)
        return PredictResponse(**record)

    @app.post("/case-study", response_model=CaseStudyResponse)
    def case_study(request: CaseStudyRequest):
        try:
            record = pipeline.case_study(request.question, request.image_id,
                                         question_id=request.question_id,
                                         top5=request.top5)
        except FactVqaError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return CaseStudyResponse(**record)

    return app
