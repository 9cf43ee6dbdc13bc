"""HTTP scoring service so an external training loop can request rewards.

POST /score     RewardRequest -> RewardResponse (one request, one response)
GET  /health    {"status": "ready"}
POST /shutdown  asks the running server to exit after in-flight requests
"""

from __future__ import annotations

import logging

import uvicorn
from fastapi import FastAPI, HTTPException, Request

from .errors import EvsgError
from .rewards import RewardWeights, SimilarityScorer
from .schemas import Health, RewardRequest, RewardResponse, score_request

log = logging.getLogger(__name__)


def create_app(weights: RewardWeights = RewardWeights(), scorer: SimilarityScorer | None = None) -> FastAPI:
    app = FastAPI(title="evsg reward service", version="0.1.0")
    app.state.server = None

    @app.get("/health", response_model=Health)
    def health() -> Health:
        return Health(status="ready")

    # Plain def: FastAPI runs it in a worker thread, so requests score concurrently.
    @app.post("/score", response_model=RewardResponse)
    def score(body: RewardRequest) -> RewardResponse:
        try:
            return score_request(body, weights, scorer)
        except EvsgError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None

    @app.post("/shutdown", response_model=Health)
    def shutdown(request: Request) -> Health:
        server = request.app.state.server
        if server is not None:
            server.should_exit = True
        return Health(status="stopping")

    return app


def serve_rewards(weights: RewardWeights = RewardWeights(), host: str = "127.0.0.1", port: int = 8765,
                  scorer: SimilarityScorer | None = None) -> None:
    app = create_app(weights, scorer)
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level="info"))
    app.state.server = server
    log.info("reward service listening on http://%s:%d", host, port)
    server.run()
