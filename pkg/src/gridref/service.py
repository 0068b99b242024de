"""HTTP session service around the multi-round interaction loop.

Sessions play Algorithm-style episodes where the click is the grounding
verdict: in human modes the clicker IS the listener, in model-listener mode
a scripted client can click the served model prediction to replay offline
inference bit-for-bit. Success means the clicked object is the target, which
in this grid world (disjoint boxes) coincides with the IoU > 0.5 rule.
"""

from __future__ import annotations

import os
import threading
import uuid
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel

from .errors import ConfigurationError
from .interaction import RoundEntry, RoundTrace, initial_expression, refine_expression
from .listener import Listener, OracleListener, load_listener
from .metrics import Expression, human_eval_accuracy, iou
from .speaker import Speaker, load_speaker
from .world import Overlay, RefSample, Scene, WorldDataset, load_dataset, render_scene

SERVICE_SCHEMA_VERSION = 1

MODES = ("model-listener", "human-eval", "annotator")
ENV_ROOT = "GRIDREF_ROOT"


@dataclass
class Session:
    session_id: str
    mode: str
    split: str
    evaluator_id: str | None
    sample: RefSample
    scene: Scene
    max_round: int
    trace: RoundTrace
    current_expression: Expression
    round: int = 0
    done: bool = False
    located: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock)


class ServiceState:
    def __init__(
        self,
        dataset: WorldDataset,
        speaker: Speaker,
        reinforced: Speaker,
        listener: Listener,
        max_round: int = 5,
        beam_width: int = 5,
    ):
        self.dataset = dataset
        self.speaker = speaker
        self.reinforced = reinforced
        self.listener = listener
        self.max_round = max_round
        self.beam_width = beam_width
        self.sessions: dict[str, Session] = {}
        self._cursor: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def next_sample(self, split: str, sample_index: int | None) -> RefSample:
        samples = self.dataset.split_samples(split)
        if not samples:
            raise HTTPException(404, detail={"code": "empty_split", "message": f"no samples in {split!r}"})
        if sample_index is not None:
            if not 0 <= sample_index < len(samples):
                raise HTTPException(
                    404, detail={"code": "unknown_sample", "message": f"sample_index out of range for {split!r}"}
                )
            return samples[sample_index]
        with self._lock:
            index = self._cursor[split] % len(samples)
            self._cursor[split] += 1
        return samples[index]


class CreateSessionRequest(BaseModel):
    split: str = "val"
    mode: str = "human-eval"
    max_round: int | None = None
    sample_index: int | None = None
    evaluator_id: str | None = None


class CreateSessionResponse(BaseModel):
    schema_version: int = SERVICE_SCHEMA_VERSION
    session_id: str
    scene_id: str
    render_url: str
    split: str
    mode: str
    round: int
    max_round: int
    expression: str
    target_object_id: int | None = None
    listener_prediction: int | None = None


class ClickRequest(BaseModel):
    object_id: int


class ClickResponse(BaseModel):
    schema_version: int = SERVICE_SCHEMA_VERSION
    iou: float
    located: bool
    round: int
    done: bool
    next_expression: str | None = None
    final_expression: str | None = None
    listener_prediction: int | None = None


class SessionSummary(BaseModel):
    schema_version: int = SERVICE_SCHEMA_VERSION
    session_id: str
    split: str
    mode: str
    done: bool
    located: bool
    rounds_used: int
    evaluator_id: str | None = None


class HumanSummary(BaseModel):
    schema_version: int = SERVICE_SCHEMA_VERSION
    total: int
    correct: int
    accuracy: float | None
    by_split: dict[str, float]
    by_evaluator: dict[str, float]


def _load_state_from_root(root: Path) -> ServiceState:
    dataset = load_dataset(root / "data")
    ckpt_dir = root / "checkpoints"
    speaker = load_speaker(ckpt_dir / "speaker-ireg.pt")
    reinforced_path = ckpt_dir / "speaker-reinforced.pt"
    reinforced = load_speaker(reinforced_path) if reinforced_path.exists() else speaker
    listener_path = ckpt_dir / "listener.pt"
    listener: Listener = load_listener(listener_path) if listener_path.exists() else OracleListener()
    return ServiceState(dataset, speaker, reinforced, listener)


def create_app(state: ServiceState | None = None, root: Path | str | None = None) -> FastAPI:
    if state is None:
        root = Path(root or os.environ.get(ENV_ROOT, "."))
        state = _load_state_from_root(root)

    app = FastAPI(title="gridref session service")
    app.state.service = state

    def get_session(session_id: str) -> Session:
        session = state.sessions.get(session_id)
        if session is None:
            raise HTTPException(404, detail={"code": "session_not_found", "message": session_id})
        return session

    def model_prediction(session: Session) -> int | None:
        if session.mode != "model-listener":
            return None
        return state.listener.locate(session.scene, session.current_expression).predicted_index

    @app.post("/api/sessions", response_model=CreateSessionResponse)
    def create_session(request: CreateSessionRequest) -> CreateSessionResponse:
        if request.mode not in MODES:
            raise HTTPException(422, detail={"code": "unknown_mode", "message": request.mode})
        try:
            sample = state.next_sample(request.split, request.sample_index)
        except ValueError as exc:
            raise HTTPException(422, detail={"code": "unknown_split", "message": str(exc)}) from exc
        scene = state.dataset.scene_for(sample)
        max_round = request.max_round or state.max_round
        if max_round < 1:
            raise HTTPException(422, detail={"code": "bad_max_round", "message": "max_round must be >= 1"})
        expression = initial_expression(state.reinforced, scene, sample.target_index, state.beam_width)
        session = Session(
            session_id=uuid.uuid4().hex,
            mode=request.mode,
            split=request.split,
            evaluator_id=request.evaluator_id,
            sample=sample,
            scene=scene,
            max_round=max_round,
            trace=RoundTrace(scene_id=scene.scene_id, target_index=sample.target_index),
            current_expression=expression,
        )
        with state._lock:
            state.sessions[session.session_id] = session
        return CreateSessionResponse(
            session_id=session.session_id,
            scene_id=scene.scene_id,
            render_url=f"/api/scenes/{scene.scene_id}/render",
            split=session.split,
            mode=session.mode,
            round=0,
            max_round=max_round,
            expression=" ".join(expression),
            # human evaluators must find the target from the expression alone
            target_object_id=None if session.mode == "human-eval" else sample.target_index,
            listener_prediction=model_prediction(session),
        )

    @app.post("/api/sessions/{session_id}/click", response_model=ClickResponse)
    def click(session_id: str, request: ClickRequest) -> ClickResponse:
        session = get_session(session_id)
        with session.lock:
            if session.done:
                raise HTTPException(409, detail={"code": "session_complete", "message": session_id})
            if not 0 <= request.object_id < len(session.scene.objects):
                raise HTTPException(404, detail={"code": "unknown_object", "message": str(request.object_id)})
            scene = session.scene
            target = session.sample.target_index
            clicked = scene.objects[request.object_id]
            score = iou(scene.objects[target].bbox, clicked.bbox)
            located = request.object_id == target
            session.trace.entries.append(
                RoundEntry(
                    round_index=session.round,
                    expression=session.current_expression,
                    predicted_index=request.object_id,
                    predicted_bbox=clicked.bbox,
                    iou=score,
                    located=located,
                )
            )
            if located:
                session.done = True
                session.located = True
                session.trace.termination = f"located_at_round_{session.round}"
                session.trace.final_expression = session.current_expression
                return ClickResponse(
                    iou=score, located=True, round=session.round, done=True,
                    final_expression=" ".join(session.current_expression),
                )
            if session.round + 1 >= session.max_round:
                session.done = True
                session.trace.termination = "budget_exhausted"
                session.trace.final_expression = session.current_expression
                return ClickResponse(
                    iou=score, located=False, round=session.round, done=True,
                    final_expression=" ".join(session.current_expression),
                )
            refined = refine_expression(
                state.speaker, scene, target, session.current_expression, request.object_id, state.beam_width
            )
            if refined == session.current_expression:
                session.trace.stagnation_count += 1
            session.current_expression = refined
            session.round += 1
            return ClickResponse(
                iou=score, located=False, round=session.round, done=False,
                next_expression=" ".join(refined),
                listener_prediction=model_prediction(session),
            )

    @app.get("/api/sessions/{session_id}/trace")
    def trace(session_id: str) -> dict:
        return get_session(session_id).trace.to_json()

    @app.get("/api/sessions/{session_id}/summary", response_model=SessionSummary)
    def summary(session_id: str) -> SessionSummary:
        session = get_session(session_id)
        return SessionSummary(
            session_id=session.session_id,
            split=session.split,
            mode=session.mode,
            done=session.done,
            located=session.located,
            rounds_used=len(session.trace.entries),
            evaluator_id=session.evaluator_id,
        )

    @app.get("/api/eval/human-summary", response_model=HumanSummary)
    def human_summary() -> HumanSummary:
        completed = [
            s for s in state.sessions.values() if s.done and s.mode in ("human-eval", "annotator")
        ]
        judgments = [s.located for s in completed]
        by_split: dict[str, float] = {}
        for split in {s.split for s in completed}:
            by_split[split] = human_eval_accuracy([s.located for s in completed if s.split == split])
        by_evaluator: dict[str, float] = {}
        for evaluator in {s.evaluator_id for s in completed if s.evaluator_id}:
            by_evaluator[evaluator] = human_eval_accuracy(
                [s.located for s in completed if s.evaluator_id == evaluator]
            )
        return HumanSummary(
            total=len(judgments),
            correct=sum(judgments),
            accuracy=human_eval_accuracy(judgments) if judgments else None,
            by_split=by_split,
            by_evaluator=by_evaluator,
        )

    @app.get("/api/scenes/{scene_id}/render")
    def render(scene_id: str, highlight: int | None = None) -> Response:
        scene = state.dataset.scenes.get(scene_id)
        if scene is None:
            raise HTTPException(404, detail={"code": "scene_not_found", "message": scene_id})
        overlays = []
        if highlight is not None:
            if not 0 <= highlight < len(scene.objects):
                raise HTTPException(404, detail={"code": "unknown_object", "message": str(highlight)})
            overlays.append(Overlay(scene.objects[highlight].bbox, label="target", kind="target"))
        return Response(content=render_scene(scene, overlays), media_type="image/svg+xml")

    ui_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if ui_dir.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
