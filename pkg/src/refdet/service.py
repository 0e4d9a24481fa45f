"""HTTP facade: a scoring endpoint plus the blinded psychophysics backend.

The study manifest (image ids with ground-truth labels) stays server-side.
Trial responses never carry labels; the server stamps ground truth into the
trial log itself when an answer arrives, so a compromised client can bias
only its own responses, never unblind itself.

Response times are measured client-side (display to keypress) and trusted;
the server keeps its own serve/answer timestamps for outlier auditing.
Sessions live in memory and are snapshotted to disk after every mutation,
which at desk scale is cheaper than being clever.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .curation import COHORTS, TrialRecord, append_trial
from .detector import Detector, detector_fingerprint, detector_from_tensors, score
from .errors import ContractViolation, StoreError
from .store import Sample, load_archive, load_samples, parse_feature_bytes

API_PREFIX = "/v1"


@dataclass
class Session:
    session_id: str
    participant_id: str
    cohort: str
    plan: list[str]            # shuffled image ids, fixed at creation
    started_at: float
    cursor: int = 0
    served: dict[str, str] = field(default_factory=dict)   # trial_id -> image_id
    answered: set[str] = field(default_factory=set)
    serve_ts: dict[str, float] = field(default_factory=dict)

    def exhausted(self) -> bool:
        return self.cursor >= len(self.plan)


@dataclass
class ServiceState:
    detector: Detector | None
    study: dict[str, Sample]   # image_id -> features + PRIVATE label
    trial_log: Path
    image_base: str = "/images"
    token: str | None = None
    snapshot_path: Path | None = None
    sessions: dict[str, Session] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def snapshot(self) -> None:
        if self.snapshot_path is None:
            return
        payload = {
            sid: {
                "participant_id": s.participant_id,
                "cohort": s.cohort,
                "plan": s.plan,
                "cursor": s.cursor,
                "answered": sorted(s.answered),
                "started_at": s.started_at,
            }
            for sid, s in self.sessions.items()
        }
        tmp = self.snapshot_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, sort_keys=True))
        tmp.replace(self.snapshot_path)


class SessionBody(BaseModel):
    participant_id: str = Field(min_length=1)
    cohort: Literal["lay", "cv_expert", "aigi_expert"]
    seed: int = 0


class AnswerBody(BaseModel):
    trial_id: str = Field(min_length=1)
    chosen: Literal[0, 1]
    S: int = Field(ge=1, le=4)
    RT_ms: float = Field(gt=0)


def _err(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"detail": message})


def create_app(
    detector: Detector | None,
    study: list[Sample],
    trial_log: str | Path,
    image_base: str = "/images",
    token: str | None = None,
    snapshot_path: str | Path | None = None,
) -> FastAPI:
    """Assemble the service around an already-loaded model and study."""
    ids = [s.image_id for s in study]
    if len(set(ids)) != len(ids):
        raise ContractViolation("study manifest has duplicate image ids")
    if any(not s.image_id for s in study):
        raise ContractViolation("study samples must carry image ids")
    state = ServiceState(
        detector=detector,
        study={s.image_id: s for s in study},
        trial_log=Path(trial_log),
        image_base=image_base,
        token=token,
        snapshot_path=Path(snapshot_path) if snapshot_path else None,
    )
    app = FastAPI(title="refdet", openapi_url=f"{API_PREFIX}/openapi.json")
    app.state.refdet = state

    @app.middleware("http")
    async def check_token(request: Request, call_next):
        if state.token is not None:
            header = request.headers.get("authorization", "")
            if header != f"Bearer {state.token}":
                return _err(401, "missing or bad bearer token")
        return await call_next(request)

    @app.post(f"{API_PREFIX}/score")
    async def score_endpoint(request: Request):
        if state.detector is None:
            return _err(503, "model not loaded")
        body = await request.body()
        content_type = request.headers.get("content-type", "")
        try:
            if content_type.startswith("application/json"):
                try:
                    obj = json.loads(body)
                except json.JSONDecodeError:
                    return _err(400, "body is not valid JSON")
                image_id = obj.get("image_id") if isinstance(obj, dict) else None
                if not image_id:
                    return _err(400, "JSON body must carry image_id")
                sample = state.study.get(image_id)
                if sample is None:
                    return _err(404, f"unknown image_id {image_id!r}")
                feats = sample.features
            else:
                feats = parse_feature_bytes(body)
            result = score(state.detector, feats)
        except (StoreError, ContractViolation) as exc:
            return _err(400, f"malformed payload: {exc}")
        return {
            "y_pred": result.y_pred,
            "is_generated": result.is_generated,
            "s_max": result.s_max,
            "s_ent": result.s_ent,
            "model_fingerprint": detector_fingerprint(state.detector),
        }

    @app.post(f"{API_PREFIX}/session", status_code=201)
    def create_session(body: SessionBody):
        plan = list(state.study)
        rng = np.random.default_rng(body.seed)
        rng.shuffle(plan)
        session = Session(
            session_id=uuid.uuid4().hex,
            participant_id=body.participant_id,
            cohort=body.cohort,
            plan=plan,
            started_at=time.time(),
        )
        with state.lock:
            state.sessions[session.session_id] = session
            state.snapshot()
        return {"session_id": session.session_id, "n_trials": len(plan)}

    @app.get(f"{API_PREFIX}/trial/next")
    def trial_next(session: str):
        with state.lock:
            sess = state.sessions.get(session)
            if sess is None:
                return _err(404, f"unknown session {session!r}")
            if sess.exhausted():
                return _err(410, "session plan exhausted")
            image_id = sess.plan[sess.cursor]
            trial_id = f"{sess.session_id}:{sess.cursor:04d}"
            sess.cursor += 1
            sess.served[trial_id] = image_id
            sess.serve_ts[trial_id] = time.time()
            state.snapshot()
        return {
            "trial_id": trial_id,
            "image_url": f"{state.image_base}/{image_id}",
        }

    @app.post(f"{API_PREFIX}/trial/answer", status_code=204)
    def trial_answer(body: AnswerBody):
        session_id = body.trial_id.rsplit(":", 1)[0]
        with state.lock:
            sess = state.sessions.get(session_id)
            if sess is None or body.trial_id not in sess.served:
                return _err(404, f"trial {body.trial_id!r} is not outstanding")
            if body.trial_id in sess.answered:
                return _err(409, f"trial {body.trial_id!r} already answered")
            image_id = sess.served[body.trial_id]
            record = TrialRecord(
                image_id=image_id,
                ground_truth=state.study[image_id].label,
                response=body.chosen,
                rating=body.S,
                rt_ms=body.RT_ms,
                trial_id=body.trial_id,
                session_id=sess.session_id,
                participant_id=sess.participant_id,
                cohort=sess.cohort,
                timestamp=time.time(),
            )
            append_trial(state.trial_log, record)
            sess.answered.add(body.trial_id)
            state.snapshot()
        return Response(status_code=204)

    return app


def make_app(
    checkpoint: str | Path,
    manifest: str | Path,
    trial_log: str | Path,
    image_base: str = "/images",
    token: str | None = None,
    snapshot_path: str | Path | None = None,
) -> FastAPI:
    """File-based assembly for deployment and cross-process tests."""
    detector = detector_from_tensors(*load_archive(checkpoint))
    study = load_samples(manifest)
    return create_app(detector, study, trial_log, image_base=image_base,
                      token=token, snapshot_path=snapshot_path)
