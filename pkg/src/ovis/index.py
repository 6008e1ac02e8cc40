"""Precomputed instance-token similarity index and query answering.

At build time every image's instances are encoded jointly (no text) and
scored against every column of the base-token matrix with the configured
similarity measure, filling an N x D matrix S. A query then costs only a
tokenization, a gather of its token columns and a top-k selection - no
encoder work. ``brute_force_search`` is the independent no-precompute path
used to verify the index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import binio, vocab as vocab_mod
from .encoder import ModelParams, checkpoint_fingerprint, encode
from .errors import DataError, UsageError
from .metrics import Box
from .store import InstanceStore
from .vocab import Vocabulary

MEASURES = ("cosine", "dp", "ndp")
_MEASURE_ALIASES = {
    "cosine": "cosine",
    "dp": "dp",
    "dot-product": "dp",
    "ndp": "ndp",
    "normalized-dot-product": "ndp",
}
_NORM_FLOOR = 0.0  # exact zero-norm check; see ZeroNormError


class SearchIndexError(DataError):
    pass


class ZeroNormError(SearchIndexError):
    pass


class BadMeasureError(UsageError):
    pass


def parse_measure(name: str) -> str:
    try:
        return _MEASURE_ALIASES[name.strip().lower()]
    except KeyError:
        raise BadMeasureError(f"unknown similarity measure {name!r}; use one of {MEASURES}")


def psi(measure: str, a: np.ndarray, b: np.ndarray) -> float:
    """Similarity of an instance representation ``a`` and a token embedding
    ``b``: cosine, dot product, or instance-normalized dot product."""
    measure = parse_measure(measure)
    a = np.asarray(a, dtype=np.float32).reshape(-1)
    b = np.asarray(b, dtype=np.float32).reshape(-1)
    if a.shape != b.shape:
        raise SearchIndexError(f"psi on mismatched dimensions {a.shape} vs {b.shape}")
    if measure == "dp":
        return float(np.dot(a, b))
    na = float(np.linalg.norm(a))
    if na <= _NORM_FLOOR:
        raise ZeroNormError("zero-norm instance representation")
    if measure == "ndp":
        return float(np.dot(a, b) / na)
    nb = float(np.linalg.norm(b))
    if nb <= _NORM_FLOOR:
        raise ZeroNormError("zero-norm token embedding")
    return float(np.dot(a, b) / (na * nb))


def similarity_matrix(reps: np.ndarray, token_matrix: np.ndarray, measure: str) -> np.ndarray:
    """psi of every representation row against every token column.

    reps: n x d; token_matrix: d x D; returns n x D float32.
    """
    measure = parse_measure(measure)
    reps = np.asarray(reps, dtype=np.float32)
    token_matrix = np.asarray(token_matrix, dtype=np.float32)
    if measure == "dp":
        return reps @ token_matrix
    norms = np.linalg.norm(reps, axis=1, keepdims=True)
    if np.any(norms <= _NORM_FLOOR):
        raise ZeroNormError("zero-norm instance representation")
    if measure == "ndp":
        return (reps / norms) @ token_matrix
    col_norms = np.linalg.norm(token_matrix, axis=0, keepdims=True)
    if np.any(col_norms <= _NORM_FLOOR):
        raise ZeroNormError("zero-norm token embedding")
    return (reps / norms) @ (token_matrix / col_norms)


@dataclass(frozen=True)
class IndexRecord:
    instance_id: int
    image_id: str
    box: Box


@dataclass
class SearchIndex:
    """The query-time artifact: S plus instance metadata.

    Row j of ``s`` belongs to ``instances[j]``; ``fingerprint`` is the
    CRC-32 of the checkpoint payload the index was built from.
    """

    s: np.ndarray  # N x D float32
    instances: list[IndexRecord]
    measure: str
    fingerprint: int

    def __post_init__(self) -> None:
        self.s = np.ascontiguousarray(self.s, dtype=np.float32)
        if self.s.ndim != 2:
            raise SearchIndexError(f"similarity matrix must be 2-D, got {self.s.shape}")
        if len(self.instances) != self.s.shape[0]:
            raise SearchIndexError(
                f"{len(self.instances)} instance records for {self.s.shape[0]} matrix rows"
            )

    @property
    def n_instances(self) -> int:
        return self.s.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.s.shape[1]


@dataclass(frozen=True)
class Hit:
    rank: int
    instance_id: int
    image_id: str
    box: Box
    score: float


@dataclass(frozen=True)
class QueryResult:
    hits: tuple[Hit, ...]
    tokens: tuple[str, ...]
    unk: bool
    k_capped: bool  # k exceeded the instance count; all instances returned


def encode_instances(params: ModelParams, store: InstanceStore) -> np.ndarray:
    """Contextualized representations of every instance, image by image
    (instances are never encoded across image boundaries)."""
    reps = np.zeros((store.n_instances, params.config.hidden), dtype=np.float32)
    with ad.no_grad():
        for image in store.images:
            if not image.instances:
                warnings.warn(f"image {image.image_id!r} has no instances; skipped")
                continue
            encoded = encode(params, [], store.image_features(image))
            ids = [inst.instance_id for inst in image.instances]
            reps[ids, :] = encoded.visual_out.data
    return reps


def build_index(store: InstanceStore, params: ModelParams, measure: str) -> SearchIndex:
    """Precompute psi between every instance and every token column."""
    measure = parse_measure(measure)
    if store.n_instances == 0:
        raise SearchIndexError("cannot build an index from an empty store")
    if store.feature_dim != params.config.feature_dim:
        raise SearchIndexError(
            f"store feature dim {store.feature_dim} != model feature dim "
            f"{params.config.feature_dim}"
        )
    reps = encode_instances(params, store)
    s = similarity_matrix(reps, params.token_embed.data, measure)
    records = [
        IndexRecord(inst.instance_id, inst.image_id, inst.box) for inst in store.all_instances()
    ]
    return SearchIndex(
        s=s, instances=records, measure=measure, fingerprint=checkpoint_fingerprint(params)
    )


def _rank_scores(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the top-k scores; ties broken by ascending position."""
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]


def _query_token_ids(vocab: Vocabulary, query: str) -> tuple[list[int], list[str], bool]:
    seq = vocab_mod.tokenize(vocab, query)
    tokens = vocab_mod.tokens_of(vocab, seq.ids)
    unk = vocab.unk_id in seq.ids
    return list(seq.ids), tokens, unk


def score_query(index: SearchIndex, vocab: Vocabulary, query: str, k: int) -> QueryResult:
    """Answer a query from the precomputed matrix: a score is the mean of
    the instance's S entries over the query's token ids."""
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if vocab.size != index.vocab_size:
        raise SearchIndexError(
            f"vocabulary size {vocab.size} != index token count {index.vocab_size}"
        )
    ids, tokens, unk = _query_token_ids(vocab, query)
    scores = index.s[:, ids].mean(axis=1, dtype=np.float32)
    k_capped = k > index.n_instances
    top = _rank_scores(scores, min(k, index.n_instances))
    hits = tuple(
        Hit(
            rank=r + 1,
            instance_id=index.instances[j].instance_id,
            image_id=index.instances[j].image_id,
            box=index.instances[j].box,
            score=float(scores[j]),
        )
        for r, j in enumerate(top)
    )
    return QueryResult(hits=hits, tokens=tuple(tokens), unk=unk, k_capped=k_capped)


def brute_force_search(
    store: InstanceStore,
    params: ModelParams,
    vocab: Vocabulary,
    query: str,
    measure: str,
    k: int,
) -> QueryResult:
    """No-precompute oracle: re-encode and score every instance against
    every query token directly. Same ranking contract as score_query."""
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    measure = parse_measure(measure)
    ids, tokens, unk = _query_token_ids(vocab, query)
    token_cols = [params.token_embed.data[:, t] for t in ids]

    scores = np.zeros(store.n_instances, dtype=np.float32)
    records: list[IndexRecord] = []
    with ad.no_grad():
        for image in store.images:
            if not image.instances:
                continue
            encoded = encode(params, [], store.image_features(image))
            for row, inst in enumerate(image.instances):
                rep = encoded.visual_out.data[row, :]
                per_token = np.array(
                    [psi(measure, rep, col) for col in token_cols], dtype=np.float32
                )
                scores[inst.instance_id] = per_token.mean(dtype=np.float32)
    for inst in store.all_instances():
        records.append(IndexRecord(inst.instance_id, inst.image_id, inst.box))

    k_capped = k > store.n_instances
    top = _rank_scores(scores, min(k, store.n_instances))
    hits = tuple(
        Hit(
            rank=r + 1,
            instance_id=records[j].instance_id,
            image_id=records[j].image_id,
            box=records[j].box,
            score=float(scores[j]),
        )
        for r, j in enumerate(top)
    )
    return QueryResult(hits=hits, tokens=tuple(tokens), unk=unk, k_capped=k_capped)


# ---------------------------------------------------------------------------
# index file
# ---------------------------------------------------------------------------

_MEASURE_TAGS = {"cosine": 0, "dp": 1, "ndp": 2}
_TAG_MEASURES = {v: k for k, v in _MEASURE_TAGS.items()}


def save_index(index: SearchIndex, path: str | Path) -> None:
    w = binio.PayloadWriter()
    w.u8(_MEASURE_TAGS[index.measure])
    w.u32(index.fingerprint & 0xFFFFFFFF)
    w.u32(index.n_instances)
    w.u32(index.vocab_size)
    for rec in index.instances:
        w.u32(rec.instance_id)
        w.string(rec.image_id)
        for v in rec.box:
            w.f32(v)
    w.raw(np.ascontiguousarray(index.s, dtype="<f4").tobytes())
    binio.write_framed(path, binio.INDEX_MAGIC, w.getvalue())


def load_index(path: str | Path) -> SearchIndex:
    _, payload = binio.read_framed(path, binio.INDEX_MAGIC)
    r = binio.PayloadReader(payload, str(path))
    tag = r.u8()
    if tag not in _TAG_MEASURES:
        raise SearchIndexError(f"{path}: unknown measure tag {tag}")
    fingerprint = r.u32()
    n = r.u32()
    d = r.u32()
    records = []
    for _ in range(n):
        instance_id = r.u32()
        image_id = r.string()
        box = (r.f32(), r.f32(), r.f32(), r.f32())
        records.append(IndexRecord(instance_id, image_id, box))
    s = np.frombuffer(r.raw(n * d * 4), dtype="<f4").reshape(n, d).copy()
    r.expect_done()
    return SearchIndex(s=s, instances=records, measure=_TAG_MEASURES[tag], fingerprint=fingerprint)


def verify_fingerprint(index: SearchIndex, params: ModelParams) -> bool:
    """True when the index was built from exactly these parameters."""
    return index.fingerprint == checkpoint_fingerprint(params)
