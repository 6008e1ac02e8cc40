"""Detection-style retrieval evaluation.

IoU matching with single-use ground-truth boxes, AP@k / mAP@k and prec@k at
IoU thresholds {0.3, 0.5, 0.7}, their arithmetic mean (mAP_all / prec_all),
and an error-decomposition pipeline splitting the gap to a perfect score
into ordering, localization and background components that sum to one with
the achieved AP.

All computation is float64 and pure; inputs are never modified.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataError

Box = tuple[float, float, float, float]  # (x, y, w, h), pixels, top-left origin

DEFAULT_IOU_THRESHOLDS = (0.3, 0.5, 0.7)
LOW_IOU = 0.01  # relaxed threshold used by the error pipeline


class EvalError(DataError):
    pass


class BadBoxError(EvalError):
    pass


class MissingQueryError(EvalError):
    pass


@dataclass(frozen=True)
class Detection:
    """One ranked hit: which image it points at and where."""

    image_id: str
    box: Box


@dataclass(frozen=True)
class GroundTruthSet:
    """Positive regions per query; distractor images simply have no entries."""

    by_query: dict[str, tuple[Detection, ...]]

    def queries(self) -> list[str]:
        return list(self.by_query)

    def positives(self, query: str) -> tuple[Detection, ...]:
        if query not in self.by_query:
            raise MissingQueryError(f"query {query!r} missing from ground truth")
        return self.by_query[query]


@dataclass(frozen=True)
class EvalConfig:
    k: int
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    low_iou: float = LOW_IOU

    def __post_init__(self) -> None:
        if self.k < 1:
            raise EvalError(f"k must be >= 1, got {self.k}")
        for t in self.iou_thresholds:
            if not 0 < t <= 1:
                raise EvalError(f"IoU threshold {t} outside (0, 1]")


@dataclass(frozen=True)
class MatchFlag:
    """Outcome of one ranked hit: TP, or FP with a failure kind."""

    is_tp: bool
    fp_kind: str | None = None  # "iou" | "background" for FPs

    IOU_FAILURE = "iou"
    BACKGROUND = "background"


@dataclass(frozen=True)
class ErrorBreakdown:
    """AP plus the three error components; sums to 1 by construction."""

    ap: float
    e_ord: float
    e_iou: float
    e_bg: float

    def as_dict(self) -> dict[str, float]:
        return {"ap": self.ap, "e_ord": self.e_ord, "e_iou": self.e_iou, "e_bg": self.e_bg}


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise BadBoxError(f"boxes need positive extents: {box_a}, {box_b}")
    ix = max(ax, bx)
    iy = max(ay, by)
    ix2 = min(ax + aw, bx + bw)
    iy2 = min(ay + ah, by + bh)
    iw = max(0.0, ix2 - ix)
    ih = max(0.0, iy2 - iy)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union


def match_detections(
    hits: Sequence[Detection],
    gt: Sequence[Detection],
    threshold: float,
) -> list[MatchFlag]:
    """Greedy matching in rank order with single-use ground truth.

    A hit is a TP when some still-unmatched GT box in the same image reaches
    the IoU threshold (the best-IoU one is consumed). FPs are classified:
    "iou" when the hit's image has any GT for the query, "background" when
    the image is a distractor for this query.
    """
    gt_by_image: dict[str, list[int]] = {}
    for i, g in enumerate(gt):
        gt_by_image.setdefault(g.image_id, []).append(i)
    consumed = [False] * len(gt)

    flags: list[MatchFlag] = []
    for hit in hits:
        candidates = gt_by_image.get(hit.image_id, [])
        best_i = -1
        best_iou = 0.0
        for i in candidates:
            if consumed[i]:
                continue
            value = iou(hit.box, gt[i].box)
            if value >= threshold and value > best_iou:
                best_i = i
                best_iou = value
        if best_i >= 0:
            consumed[best_i] = True
            flags.append(MatchFlag(is_tp=True))
        elif candidates:
            flags.append(MatchFlag(is_tp=False, fp_kind=MatchFlag.IOU_FAILURE))
        else:
            flags.append(MatchFlag(is_tp=False, fp_kind=MatchFlag.BACKGROUND))
    return flags


def average_precision_at_k(flags: Sequence[bool], gt_count: int, k: int) -> float:
    """AP@k = sum over TP ranks r <= k of Precision(r), over min(k, gt_count).

    Queries with no positives are defined to score 0.
    """
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    if gt_count <= 0:
        return 0.0
    tp = 0
    total = 0.0
    for r, rel in enumerate(flags[:k], start=1):
        if rel:
            tp += 1
            total += tp / r
    return total / min(k, gt_count)


def precision_at_k(flags: Sequence[bool], k: int) -> float:
    """prec@k = TPs in the top k over min(k, hits returned)."""
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    top = flags[:k]
    if not top:
        return 0.0
    return sum(1 for rel in top if rel) / min(k, len(top))


def mean_over_thresholds(values: Iterable[float]) -> float:
    """The *_all aggregate: plain arithmetic mean over per-threshold values."""
    values = list(values)
    if not values:
        raise EvalError("no per-threshold values to aggregate")
    return sum(values) / len(values)


@dataclass(frozen=True)
class EvalReport:
    """Aggregate and per-query metrics at the configured IoU thresholds."""

    k: int
    iou_thresholds: tuple[float, ...]
    map_at: dict[float, float]
    prec_at: dict[float, float]
    map_all: float
    prec_all: float
    per_query: dict[str, dict[float, dict[str, float]]] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "k": self.k,
            "iou_thresholds": list(self.iou_thresholds),
            "map": {str(t): self.map_at[t] for t in self.iou_thresholds},
            "precision": {str(t): self.prec_at[t] for t in self.iou_thresholds},
            "map_all": self.map_all,
            "prec_all": self.prec_all,
            "per_query": {
                q: {str(t): dict(vals) for t, vals in rows.items()}
                for q, rows in self.per_query.items()
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = [["query", "iou_threshold", "ap", "precision"]]
        for q in sorted(self.per_query):
            for t in self.iou_thresholds:
                vals = self.per_query[q][t]
                lines.append([q, f"{t:g}", f"{vals['ap']:.6f}", f"{vals['precision']:.6f}"])
        for t in self.iou_thresholds:
            lines.append(["<mean>", f"{t:g}", f"{self.map_at[t]:.6f}", f"{self.prec_at[t]:.6f}"])
        lines.append(["<mean>", "all", f"{self.map_all:.6f}", f"{self.prec_all:.6f}"])
        return "\n".join(",".join(row) for row in lines) + "\n"


def map_and_precision(
    results: Mapping[str, Sequence[Detection]],
    gt: GroundTruthSet,
    config: EvalConfig,
) -> EvalReport:
    """mAP@k and prec@k per IoU threshold plus their arithmetic means.

    Every query in ``results`` must appear in the ground truth (queries with
    zero positives are legal and contribute AP 0).
    """
    per_query: dict[str, dict[float, dict[str, float]]] = {}
    for query, hits in results.items():
        positives = gt.positives(query)  # raises MissingQueryError
        rows: dict[float, dict[str, float]] = {}
        for t in config.iou_thresholds:
            flags = [f.is_tp for f in match_detections(hits, positives, t)]
            rows[t] = {
                "ap": average_precision_at_k(flags, len(positives), config.k),
                "precision": precision_at_k(flags, config.k),
            }
        per_query[query] = rows

    map_at: dict[float, float] = {}
    prec_at: dict[float, float] = {}
    n = max(len(per_query), 1)
    for t in config.iou_thresholds:
        map_at[t] = sum(rows[t]["ap"] for rows in per_query.values()) / n
        prec_at[t] = sum(rows[t]["precision"] for rows in per_query.values()) / n

    return EvalReport(
        k=config.k,
        iou_thresholds=config.iou_thresholds,
        map_at=map_at,
        prec_at=prec_at,
        map_all=mean_over_thresholds(map_at[t] for t in config.iou_thresholds),
        prec_all=mean_over_thresholds(prec_at[t] for t in config.iou_thresholds),
        per_query=per_query,
    )


def reorder_tps_first(
    hits: Sequence[Detection], flags: Sequence[MatchFlag]
) -> list[Detection]:
    """Stable reorder: TPs ahead of FPs, preserving order within each group."""
    tps = [h for h, f in zip(hits, flags) if f.is_tp]
    fps = [h for h, f in zip(hits, flags) if not f.is_tp]
    return tps + fps


def error_analysis(
    hits: Sequence[Detection],
    gt: Sequence[Detection],
    threshold: float,
    k: int,
    low_iou: float = LOW_IOU,
) -> ErrorBreakdown:
    """Decompose 1 - AP@k into ordering, IoU and background errors.

    Telescoping construction: e_ord is the AP gain from stably reordering
    TPs ahead of FPs; e_iou the further gain from re-matching the reordered
    list at the relaxed IoU threshold; e_bg the remaining gap to 1.
    """
    flags = match_detections(hits, gt, threshold)
    ap = average_precision_at_k([f.is_tp for f in flags], len(gt), k)

    reordered = reorder_tps_first(hits, flags)
    re_flags = match_detections(reordered, gt, threshold)
    ap_reordered = average_precision_at_k([f.is_tp for f in re_flags], len(gt), k)
    e_ord = ap_reordered - ap

    low_flags = match_detections(reordered, gt, low_iou)
    ap_low = average_precision_at_k([f.is_tp for f in low_flags], len(gt), k)
    e_iou = ap_low - ap_reordered

    e_bg = 1.0 - ap_low
    return ErrorBreakdown(ap=ap, e_ord=e_ord, e_iou=e_iou, e_bg=e_bg)


# ---------------------------------------------------------------------------
# file formats: ground truth and ranked results as JSON Lines
# ---------------------------------------------------------------------------


def _parse_box(raw, source: str) -> Box:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise EvalError(f"{source}: box must be [x, y, w, h], got {raw!r}")
    x, y, w, h = (float(v) for v in raw)
    if w <= 0 or h <= 0:
        raise BadBoxError(f"{source}: box needs positive extents, got {raw!r}")
    return (x, y, w, h)


def load_ground_truth(path: str | Path) -> GroundTruthSet:
    """Read ground truth JSONL: {"query", "image_id", "box": [x, y, w, h]}."""
    by_query: dict[str, list[Detection]] = {}
    seen: set[tuple[str, str, Box]] = set()
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise EvalError(f"{path}:{line_no}: invalid JSON ({e})") from e
        query = rec["query"]
        box = _parse_box(rec["box"], f"{path}:{line_no}")
        key = (query, rec["image_id"], box)
        if key in seen:
            raise EvalError(f"{path}:{line_no}: duplicate ground-truth entry {key!r}")
        seen.add(key)
        by_query.setdefault(query, []).append(Detection(rec["image_id"], box))
    return GroundTruthSet(by_query={q: tuple(v) for q, v in by_query.items()})


def save_ground_truth(gt: GroundTruthSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for query in gt.by_query:
            for det in gt.by_query[query]:
                f.write(
                    json.dumps({"query": query, "image_id": det.image_id, "box": list(det.box)})
                    + "\n"
                )


def load_results(path: str | Path) -> dict[str, list[Detection]]:
    """Read ranked results JSONL: {"query", "rank", "image_id", "box", ...}.

    Hits are ordered by their explicit rank field within each query.
    """
    rows: dict[str, list[tuple[int, Detection]]] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        det = Detection(rec["image_id"], _parse_box(rec["box"], f"{path}:{line_no}"))
        rows.setdefault(rec["query"], []).append((int(rec["rank"]), det))
    return {
        q: [det for _, det in sorted(items, key=lambda p: p[0])] for q, items in rows.items()
    }


def write_error_report(
    breakdowns: Mapping[str, ErrorBreakdown], path: str | Path
) -> None:
    """Per-query error decomposition plus the mean, as a CSV file."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["query", "ap", "e_ord", "e_iou", "e_bg"])
        for query in sorted(breakdowns):
            b = breakdowns[query]
            writer.writerow(
                [query, f"{b.ap:.6f}", f"{b.e_ord:.6f}", f"{b.e_iou:.6f}", f"{b.e_bg:.6f}"]
            )
        if breakdowns:
            n = len(breakdowns)
            writer.writerow(
                [
                    "<mean>",
                    f"{sum(b.ap for b in breakdowns.values()) / n:.6f}",
                    f"{sum(b.e_ord for b in breakdowns.values()) / n:.6f}",
                    f"{sum(b.e_iou for b in breakdowns.values()) / n:.6f}",
                    f"{sum(b.e_bg for b in breakdowns.values()) / n:.6f}",
                ]
            )
