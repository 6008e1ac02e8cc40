"""HTTP search service.

Read-only JSON API over one or more loaded indexes (one per similarity
measure) and a shared vocabulary. Queries are pure lookups in the
precomputed matrix; the service never mutates an index, so concurrent
requests need no locking. 4xx responses carry a {code, message} envelope.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from . import index as index_mod
from .errors import OvisError, UsageError
from .index import SearchIndex
from .vocab import EmptyQueryError, Vocabulary

MEDIA_ROOT_ENV = "OVIS_MEDIA_ROOT"
_MEDIA_SUFFIXES = ("", ".png", ".jpg", ".jpeg", ".gif", ".webp")
_SCORE_DIGITS = 6


@dataclass
class ServiceConfig:
    indexes: dict[str, SearchIndex]  # measure -> index
    vocab: Vocabulary
    default_measure: str
    default_k: int = 10
    media_root: str | None = None
    cors: bool = False
    static_root: str | None = None

    def __post_init__(self) -> None:
        if not self.indexes:
            raise UsageError("service needs at least one index")
        if self.default_measure not in self.indexes:
            raise UsageError(
                f"default measure {self.default_measure!r} not among loaded "
                f"indexes {sorted(self.indexes)}"
            )
        if self.default_k < 1:
            raise UsageError(f"default k must be >= 1, got {self.default_k}")
        for measure, idx in self.indexes.items():
            if idx.measure != measure:
                raise UsageError(f"index registered under wrong measure {measure!r}")
            if idx.vocab_size != self.vocab.size:
                raise UsageError(
                    f"index token count {idx.vocab_size} != vocabulary size {self.vocab.size}"
                )


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"code": code, "message": message})


def _hit_payload(hit: index_mod.Hit) -> dict:
    return {
        "instance_id": hit.instance_id,
        "image_id": hit.image_id,
        "box": [round(v, 2) for v in hit.box],
        "score": round(hit.score, _SCORE_DIGITS),
        "rank": hit.rank,
    }


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="ovis search", docs_url=None, redoc_url=None)

    if config.cors:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware, allow_origins=["*"], allow_methods=["GET"], allow_headers=["*"]
        )

    default_index = config.indexes[config.default_measure]
    media_root = os.environ.get(MEDIA_ROOT_ENV) or config.media_root

    # instance lookup over the default index (records are measure-independent)
    by_instance_id = {rec.instance_id: rec for rec in default_index.instances}

    @app.get("/api/health")
    def health():
        return {
            "status": "ok",
            "index_fingerprint": f"{default_index.fingerprint:#010x}",
            "n_instances": default_index.n_instances,
            "measures": sorted(config.indexes),
        }

    @app.get("/api/search")
    def search(q: str = "", k: int | None = None, measure: str | None = None):
        if not q or not q.strip():
            return _error(400, "empty_query", "query parameter q is empty")
        if k is None:
            k = config.default_k
        if k < 1:
            return _error(400, "bad_k", f"k must be >= 1, got {k}")
        if measure is None:
            selected = default_index
        else:
            try:
                canonical = index_mod.parse_measure(measure)
            except index_mod.BadMeasureError as e:
                return _error(400, "bad_measure", str(e))
            selected = config.indexes.get(canonical)
            if selected is None:
                return _error(
                    400,
                    "bad_measure",
                    f"no index loaded for measure {canonical!r}; "
                    f"available: {sorted(config.indexes)}",
                )
        try:
            result = index_mod.score_query(selected, config.vocab, q, k)
        except EmptyQueryError:
            return _error(400, "empty_query", "query has no searchable words")
        return {
            "query": q,
            "tokens": list(result.tokens),
            "unk_flag": result.unk,
            "hits": [_hit_payload(h) for h in result.hits],
        }

    @app.get("/api/instance/{instance_id}")
    def instance(instance_id: int):
        rec = by_instance_id.get(instance_id)
        if rec is None:
            return _error(404, "not_found", f"no instance {instance_id}")
        return {
            "instance_id": rec.instance_id,
            "image_id": rec.image_id,
            "box": list(rec.box),
        }

    @app.get("/media/{image_id}")
    def media(image_id: str):
        if media_root and "/" not in image_id and ".." not in image_id:
            base = Path(media_root)
            for suffix in _MEDIA_SUFFIXES:
                candidate = base / f"{image_id}{suffix}"
                if candidate.is_file():
                    return FileResponse(candidate)
        return _error(404, "not_found", f"no media for {image_id!r}")

    if config.static_root:
        app.mount("/", StaticFiles(directory=config.static_root, html=True), name="ui")

    @app.exception_handler(OvisError)
    def _on_engine_error(_, exc: OvisError):  # pragma: no cover - safety net
        return _error(400, "bad_request", str(exc))

    return app
