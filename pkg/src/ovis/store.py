"""Instance stores, corpus files and cross-file validation.

The feature file is a framed binary (magic ``OVIS.FTR``) holding an N x d
float32 matrix with constant-time row access; image/instance metadata lives
in a JSON Lines sidecar, one image per line, joined to feature rows by
position. A corpus manifest records paths and CRC-32 checksums of every
file so a whole corpus can be validated in one pass.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio, metrics, vocab as vocab_mod
from .errors import DataError

Box = metrics.Box


class StoreError(DataError):
    pass


class CountMismatchError(StoreError):
    pass


@dataclass(frozen=True)
class InstanceRecord:
    instance_id: int
    image_id: str
    box: Box


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    instances: tuple[InstanceRecord, ...]
    media_path: str | None = None
    width: float | None = None
    height: float | None = None


@dataclass
class InstanceStore:
    """All images' instance records plus their feature matrix.

    Instance ids are dense 0..N-1 in file order and double as row indices
    into ``features``.
    """

    images: list[ImageRecord]
    features: np.ndarray  # N x feature_dim float32

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise StoreError(f"feature matrix must be 2-D, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise StoreError("feature matrix contains non-finite values")
        n = sum(len(img.instances) for img in self.images)
        if n != self.features.shape[0]:
            raise CountMismatchError(
                f"metadata lists {n} instances but feature matrix has "
                f"{self.features.shape[0]} rows"
            )
        expected = 0
        for img in self.images:
            for inst in img.instances:
                if inst.instance_id != expected:
                    raise StoreError(
                        f"instance ids must be dense 0..N-1 in file order; "
                        f"expected {expected}, got {inst.instance_id}"
                    )
                expected += 1

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def all_instances(self) -> list[InstanceRecord]:
        return [inst for img in self.images for inst in img.instances]

    def image_features(self, image: ImageRecord) -> np.ndarray:
        ids = [inst.instance_id for inst in image.instances]
        return self.features[ids, :]


# ---------------------------------------------------------------------------
# feature file: framed binary matrix
# ---------------------------------------------------------------------------


def save_features(features: np.ndarray, path: str | Path) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise StoreError(f"feature matrix must be 2-D, got {features.shape}")
    w = binio.PayloadWriter()
    w.u32(features.shape[0])
    w.u32(features.shape[1])
    w.raw(features.tobytes())
    binio.write_framed(path, binio.FEATURES_MAGIC, w.getvalue())


def load_features(path: str | Path) -> np.ndarray:
    _, payload = binio.read_framed(path, binio.FEATURES_MAGIC)
    r = binio.PayloadReader(payload, str(path))
    n = r.u32()
    d = r.u32()
    data = np.frombuffer(r.raw(n * d * 4), dtype="<f4").reshape(n, d)
    r.expect_done()
    if not np.all(np.isfinite(data)):
        raise StoreError(f"{path}: non-finite feature values")
    return data.copy()


# ---------------------------------------------------------------------------
# image metadata: JSON Lines, one image per line
# ---------------------------------------------------------------------------


def save_image_metadata(images: list[ImageRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for img in images:
            rec = {
                "image_id": img.image_id,
                "instances": [
                    {"instance_id": inst.instance_id, "box": list(inst.box)}
                    for inst in img.instances
                ],
            }
            if img.media_path is not None:
                rec["media_path"] = img.media_path
            if img.width is not None and img.height is not None:
                rec["width"] = img.width
                rec["height"] = img.height
            f.write(json.dumps(rec) + "\n")


def load_image_metadata(path: str | Path) -> list[ImageRecord]:
    images: list[ImageRecord] = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise StoreError(f"{path}:{line_no}: invalid JSON ({e})") from e
        instances = []
        for raw in rec.get("instances", ()):
            box = raw["box"]
            if len(box) != 4 or box[2] <= 0 or box[3] <= 0:
                raise StoreError(f"{path}:{line_no}: bad box {box!r}")
            instances.append(
                InstanceRecord(
                    instance_id=int(raw["instance_id"]),
                    image_id=rec["image_id"],
                    box=tuple(float(v) for v in box),  # type: ignore[arg-type]
                )
            )
        images.append(
            ImageRecord(
                image_id=rec["image_id"],
                instances=tuple(instances),
                media_path=rec.get("media_path"),
                width=rec.get("width"),
                height=rec.get("height"),
            )
        )
    return images


def load_store(meta_path: str | Path, feature_path: str | Path) -> InstanceStore:
    """Join metadata and features by position; errors on any inconsistency."""
    images = load_image_metadata(meta_path)
    features = load_features(feature_path)
    return InstanceStore(images=images, features=features)


def save_store(store: InstanceStore, meta_path: str | Path, feature_path: str | Path) -> None:
    save_image_metadata(store.images, meta_path)
    save_features(store.features, feature_path)


# ---------------------------------------------------------------------------
# captions / labels file: JSON Lines, one training image per line
# ---------------------------------------------------------------------------


def save_captions(rows: list[dict], path: str | Path) -> None:
    """rows: {"image_id", "caption", "labels": [[instance_index, word], ...]}"""
    with open(path, "w", encoding="utf-8") as f:
        for rec in rows:
            f.write(json.dumps(rec) + "\n")


def load_captions(path: str | Path) -> list[dict]:
    rows = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise StoreError(f"{path}:{line_no}: invalid JSON ({e})") from e
        if "image_id" not in rec or "caption" not in rec:
            raise StoreError(f"{path}:{line_no}: caption rows need image_id and caption")
        rows.append(rec)
    return rows


# ---------------------------------------------------------------------------
# corpus manifest + validation
# ---------------------------------------------------------------------------

MANIFEST_ROLES = ("vocab", "features", "images", "captions", "ground_truth")


@dataclass(frozen=True)
class CorpusManifest:
    """Paths (relative to the manifest's directory) and checksums."""

    root: Path
    files: dict[str, dict]  # role -> {"path", "crc32", "count"}

    def path_of(self, role: str) -> Path:
        return self.root / self.files[role]["path"]


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def _crc_of_file(path: Path) -> int:
    return zlib.crc32(path.read_bytes())


def write_manifest(root: str | Path, entries: dict[str, tuple[str, int]]) -> Path:
    """entries: role -> (relative path, record count). Checksums are computed
    from the files on disk."""
    root = Path(root)
    files = {}
    for role, (rel, count) in entries.items():
        files[role] = {"path": rel, "crc32": _crc_of_file(root / rel), "count": count}
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps({"version": 1, "files": files}, indent=2) + "\n")
    return manifest_path


def load_manifest(path: str | Path) -> CorpusManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise StoreError(f"{path}: unreadable manifest ({e})") from e
    return CorpusManifest(root=path.parent, files=doc["files"])


def validate_corpus(manifest: CorpusManifest) -> ValidationReport:
    """Cross-file consistency checks; errors are fatal to downstream use,
    warnings are not."""
    report = ValidationReport()

    for role, entry in manifest.files.items():
        p = manifest.root / entry["path"]
        if not p.exists():
            report.errors.append(f"{role}: missing file {p}")
            continue
        actual = _crc_of_file(p)
        if actual != entry["crc32"]:
            report.errors.append(
                f"{role}: checksum mismatch on {p} "
                f"(manifest {entry['crc32']:#010x}, actual {actual:#010x})"
            )
    if report.errors:
        return report

    vocab = vocab_mod.load_vocabulary(manifest.path_of("vocab"))
    store = load_store(manifest.path_of("images"), manifest.path_of("features"))
    image_by_id = {img.image_id: img for img in store.images}
    if "holdout_images" in manifest.files and "holdout_features" in manifest.files:
        holdout = load_store(
            manifest.path_of("holdout_images"), manifest.path_of("holdout_features")
        )
        image_by_id.update({img.image_id: img for img in holdout.images})
    known_images = set(image_by_id)

    if "captions" in manifest.files:
        for i, rec in enumerate(load_captions(manifest.path_of("captions"))):
            if rec["image_id"] not in known_images:
                report.errors.append(f"captions row {i}: unknown image {rec['image_id']!r}")
            for idx, word in rec.get("labels", ()):
                if word not in vocab:
                    report.errors.append(
                        f"captions row {i}: label word {word!r} not in vocabulary"
                    )
                img = image_by_id.get(rec["image_id"])
                if img is not None and not 0 <= idx < len(img.instances):
                    report.errors.append(
                        f"captions row {i}: label instance index {idx} out of range"
                    )

    if "ground_truth" in manifest.files:
        gt = metrics.load_ground_truth(manifest.path_of("ground_truth"))
        for query, dets in gt.by_query.items():
            for det in dets:
                if det.image_id not in known_images:
                    report.errors.append(
                        f"ground truth for {query!r}: unknown image {det.image_id!r}"
                    )
                    continue
                img = image_by_id[det.image_id]
                if img.width is not None and img.height is not None:
                    x, y, w, h = det.box
                    if x < 0 or y < 0 or x + w > img.width or y + h > img.height:
                        report.warnings.append(
                            f"ground truth for {query!r}: box {det.box} outside "
                            f"image extent {img.width}x{img.height} of {det.image_id!r}"
                        )
    return report
