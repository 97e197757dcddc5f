"""Live AB listening-test backend.

Serves scheduled comparisons and audio stimuli over HTTP, records judgments
to an append-only JSONL log, and keeps live TrueSkill standings. The log is
the single source of truth: session cursors, duplicate detection and
ratings are all rebuilt from it on startup, and every identifier (sessions,
comparisons, stimulus tokens) is derived deterministically from the service
seed, so a restarted service continues exactly where it stopped.

Stimulus payloads are blind: they carry opaque tokens and never model ids.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

from pydantic import BaseModel

from .audio import load_wav, save_wav
from .dataset import CLASS_ORDER, Manifest
from .rating import (
    DEFAULT_PARAMS,
    ComparisonRecord,
    Rating,
    SchedulePlan,
    TrueSkillParams,
    append_record,
    assessor_stats,
    load_records,
    rank,
    schedule_comparisons,
    select_segments,
    trueskill_update,
)
from .separation import residual, resolve_separator

STIMULUS_KINDS = ("extraction", "residual")


class ServiceError(Exception):
    status_code = 400


class PlanExhausted(ServiceError):
    status_code = 410


class DuplicateSubmission(ServiceError):
    status_code = 409


class UnknownComparison(ServiceError):
    status_code = 404


class UnknownSession(ServiceError):
    status_code = 404


class UnknownStimulus(ServiceError):
    status_code = 404


class InvalidStimulus(ServiceError):
    status_code = 500


def _token(*parts) -> str:
    digest = hashlib.sha1("|".join(str(p) for p in parts).encode()).hexdigest()
    return digest[:16]


def _derived_seed(*parts) -> int:
    digest = hashlib.sha1("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class Stimulus:
    token: str
    song_id: str
    segment_id: str
    start: int
    end: int
    source: str  # class value, or "" for reference clips
    kind: str  # extraction | residual | reference
    model_id: str  # "" for reference clips
    path: str

    @property
    def n_samples(self) -> int:
        return self.end - self.start


@dataclass
class StimulusStore:
    """Rendered stimulus clips plus their server-side metadata."""

    root: Path
    models: list[str]
    stimuli: dict[str, Stimulus] = field(default_factory=dict)
    segments: list[tuple[str, str]] = field(default_factory=list)

    def lookup(
        self, model_id: str, song_id: str, segment_id: str, source: str, kind: str
    ) -> Stimulus:
        for stim in self.stimuli.values():
            if (
                stim.model_id == model_id
                and stim.song_id == song_id
                and stim.segment_id == segment_id
                and stim.source == source
                and stim.kind == kind
            ):
                return stim
        raise UnknownStimulus(
            f"no stimulus for {model_id}/{song_id}/{segment_id}/{source}/{kind}"
        )

    def reference(self, song_id: str, segment_id: str) -> Stimulus:
        return self.lookup("", song_id, segment_id, "", "reference")

    def load_validated(self, token: str) -> bytes:
        """Serve a stimulus only if the file passes an audio-validity check."""
        if token not in self.stimuli:
            raise UnknownStimulus(f"unknown stimulus {token!r}")
        stim = self.stimuli[token]
        path = self.root / stim.path
        try:
            audio = load_wav(path)
        except Exception as exc:
            raise InvalidStimulus(f"stimulus {token} failed to load: {exc}") from exc
        if len(audio) != stim.n_samples:
            raise InvalidStimulus(
                f"stimulus {token} has {len(audio)} samples, expected {stim.n_samples}"
            )
        return path.read_bytes()

    def save(self) -> None:
        doc = {
            "models": self.models,
            "segments": [list(s) for s in self.segments],
            "stimuli": {t: asdict(s) for t, s in self.stimuli.items()},
        }
        (self.root / "store.json").write_text(json.dumps(doc, indent=2, sort_keys=True))

    @classmethod
    def load(cls, root: str | Path) -> "StimulusStore":
        root = Path(root)
        doc = json.loads((root / "store.json").read_text())
        store = cls(root=root, models=doc["models"])
        store.segments = [tuple(s) for s in doc["segments"]]
        store.stimuli = {t: Stimulus(**s) for t, s in doc["stimuli"].items()}
        return store


def prepare_stimuli(
    models: dict,
    manifest: Manifest,
    out_dir: str | Path,
    n_segments: int = 4,
    segment_seconds: float = 7.0,
    min_gap_seconds: float = 1.0,
    salt: str = "",
) -> StimulusStore:
    """Render extraction, residual and reference clips for every cell.

    For each model x song x selected segment x class, one extraction clip
    (the model's estimate) and one residual clip (mixture minus estimate)
    are written; the reference mixture clip is written once per segment.
    `models` maps model id to a Separator or a per-song separator factory.
    """
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    store = StimulusStore(root=out_dir, models=sorted(models))
    for song_ref in manifest.songs:
        song = manifest.load_song(song_ref.id)
        mixture = song.mixture_or_sum()
        bounds = select_segments(
            mixture, n_segments, segment_seconds, min_gap_seconds
        )
        segment_ids = [f"seg{k}" for k in range(len(bounds))]
        for segment_id, (start, end) in zip(segment_ids, bounds):
            store.segments.append((song.id, segment_id))
            ref_token = _token(salt, "ref", song.id, segment_id)
            ref_path = f"clips/{ref_token}.wav"
            save_wav(mixture.slice(start, end), out_dir / ref_path)
            store.stimuli[ref_token] = Stimulus(
                token=ref_token,
                song_id=song.id,
                segment_id=segment_id,
                start=start,
                end=end,
                source="",
                kind="reference",
                model_id="",
                path=ref_path,
            )
        for model_id in sorted(models):
            separator = resolve_separator(models[model_id], song)
            estimates = separator.separate(mixture)
            for source in CLASS_ORDER:
                extraction = estimates[source]
                suppression = residual(mixture, extraction)
                for kind, clip in (("extraction", extraction), ("residual", suppression)):
                    for segment_id, (start, end) in zip(segment_ids, bounds):
                        token = _token(
                            salt, model_id, song.id, segment_id, source.value, kind
                        )
                        path = f"clips/{token}.wav"
                        save_wav(clip.slice(start, end), out_dir / path)
                        store.stimuli[token] = Stimulus(
                            token=token,
                            song_id=song.id,
                            segment_id=segment_id,
                            start=start,
                            end=end,
                            source=source.value,
                            kind=kind,
                            model_id=model_id,
                            path=path,
                        )
    store.save()
    return store


@dataclass
class Session:
    session_id: str
    assessor: str
    category: str
    equipment: str
    plan: SchedulePlan
    cursor: int = 0

    @property
    def required(self) -> int:
        return len(self.plan)


class ListeningService:
    """Deterministic listening-test state over a stimulus store and a log."""

    def __init__(
        self,
        store: StimulusStore,
        log_path: str | Path,
        params: TrueSkillParams = DEFAULT_PARAMS,
        per_cell: int = 3,
        seed: int = 0,
    ):
        self.store = store
        self.log_path = Path(log_path)
        self.sessions_path = self.log_path.with_suffix(".sessions.jsonl")
        self.params = params
        self.per_cell = per_cell
        self.seed = seed
        self._lock = threading.Lock()
        self.ratings: dict[str, Rating] = {m: Rating() for m in store.models}
        self.sessions: dict[str, Session] = {}
        self.records: list[ComparisonRecord] = []
        self._submitted: set[str] = set()
        self._replay()

    # --- deterministic identifiers

    def _session_id(self, assessor: str) -> str:
        return _token(self.seed, "session", assessor)

    def _comparison_id(self, assessor: str, cursor: int) -> str:
        return _token(self.seed, "comparison", assessor, cursor)

    def _side_swap(self, assessor: str, cursor: int) -> bool:
        return bool(_derived_seed(self.seed, "side", assessor, cursor) & 1)

    def _build_plan(self, assessor: str) -> SchedulePlan:
        return schedule_comparisons(
            self.store.models,
            per_cell=self.per_cell,
            seed=_derived_seed(self.seed, "plan", assessor),
            segment_pool=sorted(self.store.segments),
        )

    # --- state reconstruction

    def _replay(self) -> None:
        if self.sessions_path.exists():
            for line in self.sessions_path.read_text().splitlines():
                if line.strip():
                    doc = json.loads(line)
                    self._ensure_session(
                        doc["assessor"], doc["category"], doc.get("equipment", ""),
                        persist=False,
                    )
        for record in load_records(self.log_path):
            session = self._ensure_session(
                record.assessor, record.category, "", persist=False
            )
            self._apply(record, session)

    def _ensure_session(
        self, assessor: str, category: str, equipment: str, persist: bool = True
    ) -> Session:
        session_id = self._session_id(assessor)
        if session_id in self.sessions:
            return self.sessions[session_id]
        session = Session(
            session_id=session_id,
            assessor=assessor,
            category=category,
            equipment=equipment,
            plan=self._build_plan(assessor),
        )
        self.sessions[session_id] = session
        if persist:
            self.sessions_path.parent.mkdir(parents=True, exist_ok=True)
            with self.sessions_path.open("a") as fh:
                fh.write(
                    json.dumps(
                        {"assessor": assessor, "category": category, "equipment": equipment},
                        sort_keys=True,
                    )
                    + "\n"
                )
        return session

    def _apply(self, record: ComparisonRecord, session: Session) -> None:
        new_w, new_l = trueskill_update(
            self.ratings[record.winner], self.ratings[record.loser], params=self.params
        )
        self.ratings[record.winner] = new_w
        self.ratings[record.loser] = new_l
        self.records.append(record)
        self._submitted.add(record.comparison_id)
        session.cursor += 1

    # --- operations

    def create_session(self, assessor: str, category: str, equipment: str = "") -> Session:
        """One active session per assessor: repeated calls resume it."""
        with self._lock:
            return self._ensure_session(assessor, category, equipment)

    def session(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise UnknownSession(f"unknown session {session_id!r}")
        return self.sessions[session_id]

    def next_comparison(self, session_id: str) -> dict:
        """The next scheduled comparison, with blinded stimulus tokens.

        Both sides share the song, segment, class and stimulus kind; the A/B
        side assignment is a seeded coin per comparison.
        """
        session = self.session(session_id)
        if session.cursor >= len(session.plan):
            raise PlanExhausted(f"plan of {len(session.plan)} comparisons completed")
        cell = session.plan.cells[session.cursor]
        first, second = cell.model_a, cell.model_b
        if self._side_swap(session.assessor, session.cursor):
            first, second = second, first
        stim_a = self.store.lookup(
            first, cell.song_id, cell.segment_id, cell.source.value, cell.stimulus_kind
        )
        stim_b = self.store.lookup(
            second, cell.song_id, cell.segment_id, cell.source.value, cell.stimulus_kind
        )
        reference = self.store.reference(cell.song_id, cell.segment_id)
        return {
            "comparison_id": self._comparison_id(session.assessor, session.cursor),
            "session_id": session.session_id,
            "source": cell.source.value,
            "stimulus_kind": cell.stimulus_kind,
            "reference": f"/audio/{reference.token}",
            "a": f"/audio/{stim_a.token}",
            "b": f"/audio/{stim_b.token}",
            "completed": session.cursor,
            "required": session.required,
        }

    def submit_result(
        self,
        comparison_id: str,
        choice: str,
        elapsed_seconds: float,
        switch_count: int,
        timestamp: float | None = None,
    ) -> dict:
        """Record one judgment: append to the log, update ratings, advance.

        The log append happens first; ratings are a cache over it. Duplicate
        ids are rejected without touching the log.
        """
        with self._lock:
            if comparison_id in self._submitted:
                raise DuplicateSubmission(f"comparison {comparison_id} already submitted")
            session = None
            for candidate in self.sessions.values():
                if (
                    candidate.cursor < len(candidate.plan)
                    and self._comparison_id(candidate.assessor, candidate.cursor)
                    == comparison_id
                ):
                    session = candidate
                    break
            if session is None:
                raise UnknownComparison(f"comparison {comparison_id} is not outstanding")
            cell = session.plan.cells[session.cursor]
            first, second = cell.model_a, cell.model_b
            if self._side_swap(session.assessor, session.cursor):
                first, second = second, first
            record = ComparisonRecord(
                assessor=session.assessor,
                category=session.category,
                model_a=first,
                model_b=second,
                song_id=cell.song_id,
                segment_id=cell.segment_id,
                source=cell.source.value,
                stimulus_kind=cell.stimulus_kind,
                choice=choice,
                elapsed_seconds=elapsed_seconds,
                switch_count=switch_count,
                timestamp=time.time() if timestamp is None else timestamp,
                comparison_id=comparison_id,
            )
            append_record(self.log_path, record)
            self._apply(record, session)
            return self.standings()

    def standings(self) -> dict:
        ranked = rank(self.ratings)
        return {
            "ratings": {m: {"mu": r.mu, "sigma": r.sigma} for m, r in ranked},
            "order": [m for m, _ in ranked],
            "n_comparisons": len(self.records),
        }

    def stats(self) -> dict:
        return assessor_stats(self.records)


class SessionRequest(BaseModel):
    assessor: str
    category: str
    equipment: str = ""


class ResultRequest(BaseModel):
    comparison_id: str
    choice: str
    elapsed_seconds: float
    switch_count: int


def build_app(service: ListeningService):
    """FastAPI app over a ListeningService; see README for payload schemas."""
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse, Response

    app = FastAPI(title="demixlab listening test")

    @app.exception_handler(ServiceError)
    async def service_error_handler(_request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status_code,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.post("/sessions")
    def create_session(body: SessionRequest):
        session = service.create_session(body.assessor, body.category, body.equipment)
        return {
            "session_id": session.session_id,
            "assessor": session.assessor,
            "category": session.category,
            "completed": session.cursor,
            "required": session.required,
        }

    @app.get("/sessions/{session_id}/next")
    def next_comparison(session_id: str):
        return service.next_comparison(session_id)

    @app.get("/audio/{token}")
    def audio(token: str):
        payload = service.store.load_validated(token)
        return Response(content=payload, media_type="audio/wav")

    @app.post("/results")
    def submit(body: ResultRequest):
        service.submit_result(
            body.comparison_id,
            body.choice,
            body.elapsed_seconds,
            body.switch_count,
        )
        # Blind response: progress only, no standings or model ids.
        session = None
        for candidate in service.sessions.values():
            if (
                candidate.cursor > 0
                and service._comparison_id(candidate.assessor, candidate.cursor - 1)
                == body.comparison_id
            ):
                session = candidate
                break
        return {
            "recorded": True,
            "completed": session.cursor if session else None,
            "required": session.required if session else None,
        }

    @app.get("/standings")
    def standings():
        return service.standings()

    @app.get("/stats")
    def stats():
        return service.stats()

    return app
