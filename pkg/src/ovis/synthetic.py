"""Synthetic alignment corpus.

A desk-scale stand-in for web-crawled image-caption data: each concept gets
a fixed random prototype feature vector; every "image" holds 2-5 instances
(prototype + Gaussian noise), its caption is the image's concept words in
random order, and a fraction of images carry instance labels. A held-out
split comes with ground truth (concept word -> positive instance boxes) and
extra distractor images whose instances are pure noise, so evaluation has a
realistic negative pool.

Everything is deterministic for a fixed seed; boxes are synthesized
non-overlapping rectangles so IoU matching behaves exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, store as store_mod, vocab as vocab_mod
from .errors import DataError
from .metrics import Detection, GroundTruthSet
from .store import ImageRecord, InstanceRecord, InstanceStore
from .training import TrainingExample
from .vocab import SPECIAL_TOKENS, Vocabulary

# short uncommon nouns; extended with generated names past 32 concepts
CONCEPT_WORDS = (
    "cactus", "pagoda", "fresco", "afro", "lantern", "gondola", "tripod", "anvil",
    "bonsai", "igloo", "kayak", "marimba", "obelisk", "parasol", "quill", "rickshaw",
    "sundial", "trellis", "unicycle", "violin", "waffle", "xylophone", "yurt",
    "zeppelin", "beacon", "chisel", "easel", "fjord", "gazebo", "harp", "inkwell",
    "jetty",
)

BOX_SIZE = 40.0
BOX_STRIDE = 48.0
BOX_MARGIN = 16.0
MAX_INSTANCES = 5
MIN_INSTANCES = 2


class SyntheticError(DataError):
    pass


@dataclass
class SyntheticCorpus:
    vocab: Vocabulary
    concepts: tuple[str, ...]
    labelled_concepts: frozenset[str]
    prototypes: np.ndarray  # C x feature_dim
    train_store: InstanceStore
    train_examples: list[TrainingExample]
    caption_rows: list[dict]
    holdout_store: InstanceStore
    ground_truth: GroundTruthSet

    @property
    def open_vocabulary_concepts(self) -> tuple[str, ...]:
        """Concepts never used as ILP labels (unseen at label level)."""
        return tuple(c for c in self.concepts if c not in self.labelled_concepts)


def _slot_box(slot: int) -> metrics.Box:
    return (BOX_MARGIN + BOX_STRIDE * slot, BOX_MARGIN, BOX_SIZE, BOX_SIZE)


_IMAGE_WIDTH = BOX_MARGIN * 2 + BOX_STRIDE * (MAX_INSTANCES - 1) + BOX_SIZE
_IMAGE_HEIGHT = BOX_MARGIN * 2 + BOX_SIZE


def _concept_names(count: int) -> tuple[str, ...]:
    names = list(CONCEPT_WORDS[:count])
    while len(names) < count:
        names.append(f"artifact{len(names)}")
    return tuple(names)


def _balanced_concept_stream(rng: np.random.Generator, concept_count: int):
    """Yield concept indices in shuffled full cycles, so every concept gets
    near-equal coverage regardless of corpus size."""
    while True:
        order = rng.permutation(concept_count)
        yield from order


def generate_synthetic_corpus(
    concept_count: int,
    feature_dim: int,
    images: int,
    noise: float,
    seed: int,
    label_fraction: float = 0.3,
    labelled_concept_fraction: float = 1.0,
    holdout_images: int = 60,
    distractor_images: int = 150,
) -> SyntheticCorpus:
    """Build the full corpus: vocabulary, training examples and stores, a
    held-out store with distractors, and ground truth for every concept."""
    if concept_count < 2:
        raise SyntheticError(f"need at least 2 concepts, got {concept_count}")
    if images < concept_count:
        raise SyntheticError(f"need at least {concept_count} images, got {images}")
    if noise < 0:
        raise SyntheticError(f"noise must be non-negative, got {noise}")
    if not 0 <= label_fraction <= 1:
        raise SyntheticError(f"label fraction must be in [0, 1], got {label_fraction}")

    rng = np.random.default_rng(seed)
    concepts = _concept_names(concept_count)
    vocab = vocab_mod.build_vocabulary(list(SPECIAL_TOKENS) + list(concepts))
    word_id = {c: vocab.id_of(c) for c in concepts}

    n_labelled = max(1, round(concept_count * labelled_concept_fraction))
    labelled = frozenset(concepts[:n_labelled])

    prototypes = rng.standard_normal((concept_count, feature_dim)).astype(np.float32)
    stream = _balanced_concept_stream(rng, concept_count)

    def build_image(image_id: str, next_instance_id: int):
        n = int(rng.integers(MIN_INSTANCES, MAX_INSTANCES + 1))
        concept_idx = [next(stream) for _ in range(n)]
        feats = prototypes[concept_idx] + rng.normal(0.0, noise, (n, feature_dim)).astype(
            np.float32
        )
        instances = tuple(
            InstanceRecord(next_instance_id + slot, image_id, _slot_box(slot))
            for slot in range(n)
        )
        record = ImageRecord(
            image_id=image_id,
            instances=instances,
            width=_IMAGE_WIDTH,
            height=_IMAGE_HEIGHT,
        )
        return record, feats.astype(np.float32), concept_idx

    # training split
    train_images: list[ImageRecord] = []
    train_feats: list[np.ndarray] = []
    train_examples: list[TrainingExample] = []
    caption_rows: list[dict] = []
    next_id = 0
    for i in range(images):
        record, feats, concept_idx = build_image(f"train_{i:05d}", next_id)
        next_id += len(record.instances)
        train_images.append(record)
        train_feats.append(feats)

        present = sorted(set(concept_idx))
        order = rng.permutation(len(present))
        caption_words = [concepts[present[j]] for j in order]
        caption = " ".join(caption_words)
        caption_ids = tuple(word_id[w] for w in caption_words)

        labels: list[tuple[int, int]] = []
        if rng.random() < label_fraction:
            labels = [
                (slot, word_id[concepts[c]])
                for slot, c in enumerate(concept_idx)
                if concepts[c] in labelled
            ]
        train_examples.append(
            TrainingExample(
                caption_ids=caption_ids,
                features=feats,
                labels=tuple(labels),
            )
        )
        caption_rows.append(
            {
                "image_id": record.image_id,
                "caption": caption,
                "labels": [[slot, concepts[concept_idx[slot]]] for slot, _ in labels],
            }
        )

    train_store = InstanceStore(images=train_images, features=np.concatenate(train_feats))

    # held-out split: annotated concept images + pure-noise distractors
    holdout_imgs: list[ImageRecord] = []
    holdout_feats: list[np.ndarray] = []
    gt: dict[str, list[Detection]] = {c: [] for c in concepts}
    next_id = 0
    for i in range(holdout_images):
        record, feats, concept_idx = build_image(f"eval_{i:05d}", next_id)
        next_id += len(record.instances)
        holdout_imgs.append(record)
        holdout_feats.append(feats)
        for slot, c in enumerate(concept_idx):
            gt[concepts[c]].append(Detection(record.image_id, record.instances[slot].box))
    for i in range(distractor_images):
        n = int(rng.integers(MIN_INSTANCES, MAX_INSTANCES + 1))
        feats = rng.standard_normal((n, feature_dim)).astype(np.float32)
        image_id = f"distractor_{i:05d}"
        instances = tuple(
            InstanceRecord(next_id + slot, image_id, _slot_box(slot)) for slot in range(n)
        )
        next_id += n
        holdout_imgs.append(
            ImageRecord(
                image_id=image_id,
                instances=instances,
                width=_IMAGE_WIDTH,
                height=_IMAGE_HEIGHT,
            )
        )
        holdout_feats.append(feats)

    holdout_store = InstanceStore(images=holdout_imgs, features=np.concatenate(holdout_feats))
    ground_truth = GroundTruthSet(by_query={c: tuple(gt[c]) for c in concepts})

    return SyntheticCorpus(
        vocab=vocab,
        concepts=concepts,
        labelled_concepts=labelled,
        prototypes=prototypes,
        train_store=train_store,
        train_examples=train_examples,
        caption_rows=caption_rows,
        holdout_store=holdout_store,
        ground_truth=ground_truth,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

CORPUS_FILES = {
    "vocab": "vocab.txt",
    "features": "train_features.ftr",
    "images": "train_images.jsonl",
    "captions": "captions.jsonl",
    "holdout_features": "holdout_features.ftr",
    "holdout_images": "holdout_images.jsonl",
    "ground_truth": "ground_truth.jsonl",
}


def write_corpus(corpus: SyntheticCorpus, out_dir: str | Path) -> Path:
    """Write every corpus file plus a checksum manifest; returns the
    manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab_mod.save_vocabulary(corpus.vocab, out / CORPUS_FILES["vocab"])
    store_mod.save_store(
        corpus.train_store, out / CORPUS_FILES["images"], out / CORPUS_FILES["features"]
    )
    store_mod.save_captions(corpus.caption_rows, out / CORPUS_FILES["captions"])
    store_mod.save_store(
        corpus.holdout_store,
        out / CORPUS_FILES["holdout_images"],
        out / CORPUS_FILES["holdout_features"],
    )
    metrics.save_ground_truth(corpus.ground_truth, out / CORPUS_FILES["ground_truth"])

    entries = {
        "vocab": (CORPUS_FILES["vocab"], corpus.vocab.size),
        "features": (CORPUS_FILES["features"], corpus.train_store.n_instances),
        "images": (CORPUS_FILES["images"], len(corpus.train_store.images)),
        "captions": (CORPUS_FILES["captions"], len(corpus.caption_rows)),
        "holdout_features": (
            CORPUS_FILES["holdout_features"],
            corpus.holdout_store.n_instances,
        ),
        "holdout_images": (CORPUS_FILES["holdout_images"], len(corpus.holdout_store.images)),
        "ground_truth": (
            CORPUS_FILES["ground_truth"],
            sum(len(v) for v in corpus.ground_truth.by_query.values()),
        ),
    }
    return store_mod.write_manifest(out, entries)


def load_training_inputs(
    corpus_dir: str | Path,
) -> tuple[Vocabulary, InstanceStore, list[TrainingExample]]:
    """Reload what the training loop needs from a written corpus."""
    root = Path(corpus_dir)
    vocab = vocab_mod.load_vocabulary(root / CORPUS_FILES["vocab"])
    train_store = store_mod.load_store(
        root / CORPUS_FILES["images"], root / CORPUS_FILES["features"]
    )
    image_by_id = {img.image_id: img for img in train_store.images}
    examples: list[TrainingExample] = []
    for rec in store_mod.load_captions(root / CORPUS_FILES["captions"]):
        img = image_by_id.get(rec["image_id"])
        if img is None:
            raise SyntheticError(f"caption references unknown image {rec['image_id']!r}")
        caption_ids = vocab_mod.tokenize(vocab, rec["caption"]).ids
        labels = []
        for slot, word in rec.get("labels", ()):
            token_id = vocab.id_of(word)
            if token_id is None:
                raise SyntheticError(f"label word {word!r} not in vocabulary")
            labels.append((int(slot), token_id))
        examples.append(
            TrainingExample(
                caption_ids=caption_ids,
                features=train_store.image_features(img),
                labels=tuple(labels),
            )
        )
    return vocab, train_store, examples
