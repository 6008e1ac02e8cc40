"""Alignment training: masked token prediction + instance label prediction.

Masked token prediction (MTP) masks caption tokens and predicts them from
the jointly encoded caption+instances sequence; instance label prediction
(ILP) predicts single-token class labels for the labelled subset of
instances. Both read logits off the shared base-token matrix and use
negative log-likelihood; the optimizer minimizes their sum with
decoupled-weight-decay Adam.

One training step flattens its batch into a single block-masked encoder
pass; per-example loss means are recovered with per-row NLL weights, so the
reported total is exactly the mean over examples of (mtp + ilp).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .autodiff import Tensor
from .encoder import ModelParams
from .errors import DataError, OvisError

FLOAT = np.float32

MODES = ("both", "mtp", "ilp")


class TrainingError(DataError):
    pass


class NonFiniteLossError(OvisError):
    """A training step produced a non-finite loss; carries diagnostics."""


@dataclass(frozen=True)
class TrainingExample:
    """One image-caption pair: token ids, instance features and optional
    (instance index, label token id) pairs."""

    caption_ids: tuple[int, ...]
    features: np.ndarray  # n x feature_dim
    labels: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        n = self.features.shape[0]
        for idx, token_id in self.labels:
            if not 0 <= idx < n:
                raise TrainingError(f"label instance index {idx} out of range (n={n})")
            if token_id < 0:
                raise TrainingError(f"negative label token id {token_id}")


@dataclass(frozen=True)
class MaskingPolicy:
    mask_prob: float = 0.15
    min_masks: int = 1
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.mask_prob < 1.0:
            raise TrainingError(f"mask_prob must be in (0, 1), got {self.mask_prob}")
        if self.min_masks < 1:
            raise TrainingError(f"min_masks must be >= 1, got {self.min_masks}")


def mask_tokens(
    policy: MaskingPolicy,
    caption_ids: Sequence[int],
    mask_id: int,
    rng: np.random.Generator | None = None,
) -> tuple[list[int], list[tuple[int, int]]]:
    """Mask positions independently with mask_prob, redrawing until at least
    min_masks are masked; captions shorter than min_masks are fully masked.

    Returns (masked ids, [(position, original id), ...]). Deterministic for
    a given generator state (or the policy's seed when rng is omitted).
    """
    ids = list(caption_ids)
    if not ids:
        raise TrainingError("cannot mask an empty caption")
    if rng is None:
        rng = np.random.default_rng(policy.rng_seed)
    if len(ids) <= policy.min_masks:
        chosen = np.ones(len(ids), dtype=bool)
    else:
        chosen = rng.random(len(ids)) < policy.mask_prob
        while int(chosen.sum()) < policy.min_masks:
            chosen = rng.random(len(ids)) < policy.mask_prob
    targets = [(i, ids[i]) for i in range(len(ids)) if chosen[i]]
    masked = [mask_id if chosen[i] else ids[i] for i in range(len(ids))]
    return masked, targets


def mtp_loss(
    params: ModelParams,
    masked_ids: Sequence[int],
    features: np.ndarray | None,
    targets: Sequence[tuple[int, int]],
) -> Tensor:
    """Mean NLL of the original tokens at the masked positions of one
    example, predicted from the joint encoding via the base-token matrix."""
    if not targets:
        raise TrainingError("mtp_loss requires at least one masked position")
    seq = enc.encode(params, masked_ids, features)
    positions = [pos for pos, _ in targets]
    token_ids = [tok for _, tok in targets]
    picked = ad.row_select(seq.text_out, positions)
    logits = ad.matmul(picked, params.token_embed)
    probs = ad.softmax_rows(logits)
    return ad.nll(probs, token_ids)


@dataclass
class IlpLoss:
    value: Tensor
    active: bool


def ilp_loss(params: ModelParams, example: TrainingExample) -> IlpLoss:
    """Mean NLL of label tokens over the labelled instances; inactive (zero,
    no graph) when the example carries no labels."""
    if not example.labels:
        return IlpLoss(value=ad.constant([[0.0]]), active=False)
    seq = enc.encode(params, example.caption_ids, example.features)
    instance_idx = [idx for idx, _ in example.labels]
    token_ids = [tok for _, tok in example.labels]
    picked = ad.row_select(seq.visual_out, instance_idx)
    logits = ad.matmul(picked, params.token_embed)
    probs = ad.softmax_rows(logits)
    return IlpLoss(value=ad.nll(probs, token_ids), active=True)


# ---------------------------------------------------------------------------
# optimizer: Adam with decoupled weight decay
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(
    params: ModelParams,
    lr: float,
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)
    for name, tensor in params.tensors.items():
        state.m[name] = np.zeros_like(tensor.data)
        state.v[name] = np.zeros_like(tensor.data)
    return state


def apply_updates(params: ModelParams, state: OptimizerState) -> ModelParams:
    """One decoupled-weight-decay Adam step from the gradients currently on
    the parameter tensors; returns fresh parameter leaves."""
    state.step_count += 1
    t = state.step_count
    b1 = FLOAT(state.beta1)
    b2 = FLOAT(state.beta2)
    bias1 = FLOAT(1.0 - state.beta1**t)
    bias2 = FLOAT(1.0 - state.beta2**t)
    lr = FLOAT(state.lr)
    wd = FLOAT(state.weight_decay)
    eps = FLOAT(state.eps)

    new_tensors: dict[str, Tensor] = {}
    for name, tensor in params.tensors.items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        m = state.m[name] = b1 * state.m[name] + (FLOAT(1) - b1) * g
        v = state.v[name] = b2 * state.v[name] + (FLOAT(1) - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        step = lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * tensor.data)
        new_tensors[name] = ad.leaf(tensor.data - step)
    return params.with_tensors(new_tensors)


# ---------------------------------------------------------------------------
# batched training step
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mtp: float
    ilp: float
    total: float
    ilp_active: bool


def _batch_losses(
    params: ModelParams,
    batch: Sequence[TrainingExample],
    policy: MaskingPolicy,
    rng: np.random.Generator,
    mask_id: int,
    mode: str,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[Tensor | None, Tensor | None, bool]:
    """Build (mtp_node, ilp_node, ilp_active) for one flattened batch.

    Loss nodes are weighted so each equals the mean over the *batch* of the
    per-example mean loss (absent labels contribute zero to the ILP mean).
    Both objectives read the same joint encoding of each example, so the
    ILP term sees the masked caption; in ILP-only mode captions are dropped
    entirely and instances are encoded alone.
    """
    mtp_rows: list[int] = []
    mtp_targets: list[int] = []
    mtp_weights: list[float] = []
    ilp_rows: list[int] = []
    ilp_targets: list[int] = []
    ilp_weights: list[float] = []

    use_text = mode in ("both", "mtp")
    b = len(batch)

    masked_per_example: list[list[tuple[int, int]]] = []
    flat_items: list[tuple[list[int], np.ndarray]] = []
    for ex in batch:
        if use_text:
            if not ex.caption_ids:
                raise TrainingError("training example has an empty caption")
            masked_ids, targets = mask_tokens(policy, ex.caption_ids, mask_id, rng)
            flat_items.append((masked_ids, ex.features))
            masked_per_example.append(targets)
        else:
            flat_items.append(([], ex.features))

    flat = enc.encode_batch(params, flat_items, dropout_rng=dropout_rng)

    if use_text:
        for i, targets in enumerate(masked_per_example):
            t0, _ = flat.text_spans[i]
            w = 1.0 / (b * len(targets))
            for pos, original in targets:
                mtp_rows.append(t0 + pos)
                mtp_targets.append(original)
                mtp_weights.append(w)

    ilp_active = False
    if mode in ("both", "ilp"):
        for i, ex in enumerate(batch):
            if not ex.labels:
                continue
            ilp_active = True
            v0, _ = flat.visual_spans[i]
            w = 1.0 / (b * len(ex.labels))
            for idx, token_id in ex.labels:
                ilp_rows.append(v0 + idx)
                ilp_targets.append(token_id)
                ilp_weights.append(w)

    mtp_node = None
    if use_text and mtp_rows:
        picked = ad.row_select(flat.rows, mtp_rows)
        logits = ad.matmul(picked, params.token_embed)
        mtp_node = ad.nll(ad.softmax_rows(logits), mtp_targets, mtp_weights)

    ilp_node = None
    if ilp_active:
        picked = ad.row_select(flat.rows, ilp_rows)
        logits = ad.matmul(picked, params.token_embed)
        ilp_node = ad.nll(ad.softmax_rows(logits), ilp_targets, ilp_weights)

    return mtp_node, ilp_node, ilp_active


def train_step(
    params: ModelParams,
    state: OptimizerState,
    batch: Sequence[TrainingExample],
    policy: MaskingPolicy,
    rng: np.random.Generator,
    mask_id: int,
    mode: str = "both",
    dropout_rng: np.random.Generator | None = None,
) -> tuple[ModelParams, StepMetrics]:
    """One optimization step over a batch; returns updated parameters and
    the step's loss metrics. Deterministic given the generators' states."""
    if mode not in MODES:
        raise TrainingError(f"mode must be one of {MODES}, got {mode!r}")
    if not batch:
        raise TrainingError("empty batch")

    mtp_node, ilp_node, ilp_active = _batch_losses(
        params, batch, policy, rng, mask_id, mode, dropout_rng
    )
    if mtp_node is not None and ilp_node is not None:
        total = ad.add(mtp_node, ilp_node)
    else:
        total = mtp_node if mtp_node is not None else ilp_node
    mtp_value = mtp_node.item() if mtp_node is not None else 0.0
    ilp_value = ilp_node.item() if ilp_node is not None else 0.0

    metrics = StepMetrics(
        step=state.step_count + 1,
        mtp=mtp_value,
        ilp=ilp_value,
        total=mtp_value + ilp_value,
        ilp_active=ilp_active,
    )
    if total is None:
        # nothing to optimize (e.g. ILP-only mode on an unlabelled batch)
        state.step_count += 1
        return params, metrics
    if not np.isfinite(total.data).all():
        raise NonFiniteLossError(f"non-finite loss at step {metrics.step}: {metrics}")

    ad.backward(total)
    new_params = apply_updates(params, state)
    return new_params, metrics


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3  # desk-scale default; 1e-5 is the at-scale setting
    weight_decay: float = 0.01
    mask_prob: float = 0.15
    min_masks: int = 1
    seed: int = 0
    mode: str = "both"
    log_path: str | Path | None = None


@dataclass
class TrainResult:
    params: ModelParams
    steps: list[StepMetrics]
    epoch_means: list[float]


def train(
    params: ModelParams,
    examples: Sequence[TrainingExample],
    config: TrainConfig,
    mask_token_id: int,
) -> TrainResult:
    """Run the full loop: shuffle per epoch, batch, step, log.

    Fully deterministic for fixed seeds on a single worker: one generator
    drives shuffling and masking in a fixed draw order.
    """
    if not examples:
        raise TrainingError("no training examples")
    policy = MaskingPolicy(
        mask_prob=config.mask_prob, min_masks=config.min_masks, rng_seed=config.seed
    )
    rng = np.random.default_rng(config.seed)
    dropout_rng = (
        np.random.default_rng(config.seed + 1) if params.config.dropout > 0 else None
    )
    state = init_optimizer(params, lr=config.lr, weight_decay=config.weight_decay)

    steps: list[StepMetrics] = []
    epoch_means: list[float] = []
    order = np.arange(len(examples))
    log_file = open(config.log_path, "w", newline="") if config.log_path else None
    writer = None
    if log_file:
        writer = csv.writer(log_file)
        writer.writerow(["step", "mtp", "ilp", "total"])
    try:
        for _ in range(config.epochs):
            rng.shuffle(order)
            epoch_losses: list[float] = []
            for start in range(0, len(order), config.batch_size):
                batch = [examples[i] for i in order[start : start + config.batch_size]]
                params, metrics = train_step(
                    params, state, batch, policy, rng, mask_token_id,
                    mode=config.mode, dropout_rng=dropout_rng,
                )
                steps.append(metrics)
                epoch_losses.append(metrics.total)
                if writer:
                    writer.writerow(
                        [metrics.step, f"{metrics.mtp:.6f}", f"{metrics.ilp:.6f}", f"{metrics.total:.6f}"]
                    )
            epoch_means.append(float(np.mean(epoch_losses)))
    finally:
        if log_file:
            log_file.close()
    return TrainResult(params=params, steps=steps, epoch_means=epoch_means)
