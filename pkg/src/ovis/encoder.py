"""Visual-semantic encoder.

A multi-layer bidirectional self-attention encoder over a concatenation of
caption-token embeddings and projected visual-instance features. Token
embeddings are columns of a single base-token matrix that doubles as the
output projection for both training objectives, so tokens and encoded
instances land in one shared space.

Caption tokens get absolute position embeddings; visual rows get none, only
a segment embedding, which makes encoding equivariant to instance order.

Batching works by flattening several (caption, instances) items into one
row stack with a block-diagonal attention mask, so attention never crosses
item boundaries; padding tokens are never materialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import binio
from .autodiff import Tensor
from .errors import DataError

FLOAT = np.float32


class EncoderError(DataError):
    pass


class SequenceTooLongError(EncoderError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 128
    max_text_len: int = 32
    feature_dim: int = 64
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.layers < 0:
            raise EncoderError("layers must be >= 0")
        for name in ("vocab_size", "hidden", "heads", "ffn_dim", "max_text_len", "feature_dim"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise EncoderError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class ModelParams:
    """Named parameter tensors plus the configuration that shaped them."""

    config: EncoderConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def token_embed(self) -> Tensor:
        """Base-token embedding matrix, hidden x vocab_size."""
        return self.tensors["token_embed"]

    def names(self) -> list[str]:
        return list(self.tensors)

    def with_tensors(self, tensors: dict[str, Tensor]) -> "ModelParams":
        return ModelParams(config=self.config, tensors=tensors)


@dataclass
class EncodedSequence:
    """Contextualized outputs, split back into the text and visual parts."""

    text_out: Tensor  # m x hidden
    visual_out: Tensor  # n x hidden


def init_params(config: EncoderConfig, seed: int = 0) -> ModelParams:
    """Random initialization: weights uniform in +-1/sqrt(hidden)."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(config.hidden)

    def uniform(rows: int, cols: int) -> Tensor:
        return ad.leaf(rng.uniform(-bound, bound, size=(rows, cols)).astype(FLOAT))

    def zeros(rows: int, cols: int) -> Tensor:
        return ad.leaf(np.zeros((rows, cols), dtype=FLOAT))

    def ones(rows: int, cols: int) -> Tensor:
        return ad.leaf(np.ones((rows, cols), dtype=FLOAT))

    d = config.hidden
    tensors: dict[str, Tensor] = {
        "token_embed": uniform(d, config.vocab_size),
        "pos_embed": uniform(config.max_text_len, d),
        "seg_embed": uniform(2, d),
        "vis_proj_w": uniform(config.feature_dim, d),
        "vis_proj_b": zeros(1, d),
    }
    for i in range(config.layers):
        prefix = f"layers.{i}."
        for name in ("attn_q", "attn_k", "attn_v", "attn_o"):
            tensors[prefix + name + "_w"] = uniform(d, d)
            tensors[prefix + name + "_b"] = zeros(1, d)
        tensors[prefix + "ln1_gamma"] = ones(1, d)
        tensors[prefix + "ln1_beta"] = zeros(1, d)
        tensors[prefix + "ffn_w1"] = uniform(d, config.ffn_dim)
        tensors[prefix + "ffn_b1"] = zeros(1, config.ffn_dim)
        tensors[prefix + "ffn_w2"] = uniform(config.ffn_dim, d)
        tensors[prefix + "ffn_b2"] = zeros(1, d)
        tensors[prefix + "ln2_gamma"] = ones(1, d)
        tensors[prefix + "ln2_beta"] = zeros(1, d)
    return ModelParams(config=config, tensors=tensors)


def embed_tokens(params: ModelParams, ids: Sequence[int]) -> Tensor:
    """Token columns of the base matrix + position + text segment embedding."""
    cfg = params.config
    if len(ids) > cfg.max_text_len:
        raise SequenceTooLongError(f"{len(ids)} tokens exceed max_text_len={cfg.max_text_len}")
    table = ad.transpose(params["token_embed"])  # vocab_size x hidden
    tok = ad.row_select(table, ids)
    pos = ad.row_select(params["pos_embed"], list(range(len(ids))))
    seg = ad.slice_rows(params["seg_embed"], 0, 1)
    if len(ids) == 0:
        return tok
    return ad.add(ad.add(tok, pos), seg)


def project_visual(params: ModelParams, features: np.ndarray) -> Tensor:
    """Affine map of raw instance features into the hidden space + visual
    segment embedding. Intentionally position-free."""
    cfg = params.config
    feats = np.asarray(features, dtype=FLOAT)
    if feats.ndim != 2 or feats.shape[1] != cfg.feature_dim:
        raise EncoderError(
            f"features must be n x {cfg.feature_dim}, got {feats.shape}"
        )
    seg = ad.slice_rows(params["seg_embed"], 1, 2)
    proj = ad.add(ad.matmul(ad.constant(feats), params["vis_proj_w"]), params["vis_proj_b"])
    if feats.shape[0] == 0:
        return proj
    return ad.add(proj, seg)


@dataclass
class FlatEncoding:
    """Encoded rows for a flattened batch.

    ``rows`` stacks all text rows (item order) followed by all visual rows
    (item order); the span lists give each item's [start, stop) range.
    """

    rows: Tensor
    text_spans: list[tuple[int, int]]
    visual_spans: list[tuple[int, int]]

    def split(self, item: int) -> EncodedSequence:
        t0, t1 = self.text_spans[item]
        v0, v1 = self.visual_spans[item]
        return EncodedSequence(
            text_out=ad.slice_rows(self.rows, t0, t1),
            visual_out=ad.slice_rows(self.rows, v0, v1),
        )


def _empty_features(cfg: EncoderConfig) -> np.ndarray:
    return np.zeros((0, cfg.feature_dim), dtype=FLOAT)


def encode_batch(
    params: ModelParams,
    items: Sequence[tuple[Sequence[int], np.ndarray | None]],
    key_masks: Sequence[np.ndarray] | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> FlatEncoding:
    """Encode several (token_ids, features) items in one flattened pass.

    ``key_masks``, when given, holds one boolean vector of length m+n per
    item; False positions are hidden from attention (they still produce
    output rows, which callers must ignore).
    """
    cfg = params.config
    if not items:
        raise EncoderError("encode_batch requires at least one item")

    all_ids: list[int] = []
    all_pos: list[int] = []
    text_spans: list[tuple[int, int]] = []
    feats_parts: list[np.ndarray] = []
    visual_counts: list[int] = []
    for ids, feats in items:
        ids = list(ids)
        if len(ids) > cfg.max_text_len:
            raise SequenceTooLongError(
                f"{len(ids)} tokens exceed max_text_len={cfg.max_text_len}"
            )
        start = len(all_ids)
        all_ids.extend(ids)
        all_pos.extend(range(len(ids)))
        text_spans.append((start, len(all_ids)))
        feats = _empty_features(cfg) if feats is None else np.asarray(feats, dtype=FLOAT)
        if feats.ndim != 2 or feats.shape[1] != cfg.feature_dim:
            raise EncoderError(f"features must be n x {cfg.feature_dim}, got {feats.shape}")
        feats_parts.append(feats)
        visual_counts.append(feats.shape[0])

    total_text = len(all_ids)
    total_visual = int(sum(visual_counts))
    if total_text + total_visual == 0:
        raise EncoderError("encode_batch requires at least one token or instance")

    visual_spans: list[tuple[int, int]] = []
    v = total_text
    for n in visual_counts:
        visual_spans.append((v, v + n))
        v += n

    # item-id labels per row, in [text rows..., visual rows...] order
    item_of_row = np.empty(total_text + total_visual, dtype=np.intp)
    for i, (t0, t1) in enumerate(text_spans):
        item_of_row[t0:t1] = i
    for i, (v0, v1) in enumerate(visual_spans):
        item_of_row[v0:v1] = i

    # attention visibility: same item, and the key is not masked out
    visible = item_of_row[:, None] == item_of_row[None, :]
    if key_masks is not None:
        key_ok = np.ones(total_text + total_visual, dtype=bool)
        for i, mask in enumerate(key_masks):
            mask = np.asarray(mask, dtype=bool)
            m = text_spans[i][1] - text_spans[i][0]
            n = visual_counts[i]
            if mask.shape != (m + n,):
                raise EncoderError(f"key mask for item {i} must have length {m + n}")
            key_ok[text_spans[i][0] : text_spans[i][1]] = mask[:m]
            key_ok[visual_spans[i][0] : visual_spans[i][1]] = mask[m:]
        visible = visible & key_ok[None, :]

    text_emb = embed_tokens_flat(params, all_ids, all_pos)
    vis_emb = project_visual(params, np.concatenate(feats_parts, axis=0))
    x = ad.concat_rows([text_emb, vis_emb])

    for layer in range(cfg.layers):
        x = _encoder_layer(params, layer, x, visible, dropout_rng)

    return FlatEncoding(rows=x, text_spans=text_spans, visual_spans=visual_spans)


def embed_tokens_flat(params: ModelParams, ids: Sequence[int], positions: Sequence[int]) -> Tensor:
    """As embed_tokens, with explicit (per-item restarting) positions."""
    table = ad.transpose(params["token_embed"])
    tok = ad.row_select(table, ids)
    if len(ids) == 0:
        return tok
    pos = ad.row_select(params["pos_embed"], positions)
    seg = ad.slice_rows(params["seg_embed"], 0, 1)
    return ad.add(ad.add(tok, pos), seg)


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(FLOAT) / FLOAT(1.0 - rate)
    return ad.mul(x, ad.constant(keep))


def _encoder_layer(
    params: ModelParams,
    layer: int,
    x: Tensor,
    visible: np.ndarray,
    dropout_rng: np.random.Generator | None,
) -> Tensor:
    cfg = params.config
    p = f"layers.{layer}."
    q = ad.add(ad.matmul(x, params[p + "attn_q_w"]), params[p + "attn_q_b"])
    k = ad.add(ad.matmul(x, params[p + "attn_k_w"]), params[p + "attn_k_b"])
    v = ad.add(ad.matmul(x, params[p + "attn_v_w"]), params[p + "attn_v_b"])

    dh = cfg.head_dim
    heads = []
    inv_sqrt_dh = 1.0 / math.sqrt(dh)
    for h in range(cfg.heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
        kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt_dh)
        attn = ad.softmax_rows(scores, mask=visible)
        heads.append(ad.matmul(attn, vh))
    ctx = ad.concat_cols(heads)
    attn_out = ad.add(ad.matmul(ctx, params[p + "attn_o_w"]), params[p + "attn_o_b"])
    attn_out = _dropout(attn_out, cfg.dropout, dropout_rng)
    x = ad.layer_norm(ad.add(x, attn_out), params[p + "ln1_gamma"], params[p + "ln1_beta"])

    hidden = ad.relu(ad.add(ad.matmul(x, params[p + "ffn_w1"]), params[p + "ffn_b1"]))
    ffn_out = ad.add(ad.matmul(hidden, params[p + "ffn_w2"]), params[p + "ffn_b2"])
    ffn_out = _dropout(ffn_out, cfg.dropout, dropout_rng)
    return ad.layer_norm(ad.add(x, ffn_out), params[p + "ln2_gamma"], params[p + "ln2_beta"])


def encode(
    params: ModelParams,
    token_ids: Sequence[int],
    features: np.ndarray | None,
    key_mask: np.ndarray | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> EncodedSequence:
    """Jointly encode one caption (possibly empty) and one image's instances."""
    masks = None if key_mask is None else [key_mask]
    flat = encode_batch(params, [(token_ids, features)], key_masks=masks, dropout_rng=dropout_rng)
    return flat.split(0)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def _config_payload(w: binio.PayloadWriter, cfg: EncoderConfig) -> None:
    for value in (
        cfg.vocab_size, cfg.layers, cfg.hidden, cfg.heads,
        cfg.ffn_dim, cfg.max_text_len, cfg.feature_dim,
    ):
        w.u32(value)
    w.f32(cfg.dropout)


def checkpoint_payload(params: ModelParams) -> bytes:
    w = binio.PayloadWriter()
    _config_payload(w, params.config)
    w.u32(len(params.tensors))
    for name, tensor in params.tensors.items():
        w.string(name)
        w.u32(tensor.rows)
        w.u32(tensor.cols)
        w.raw(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return w.getvalue()


def checkpoint_fingerprint(params: ModelParams) -> int:
    """CRC-32 of the checkpoint payload; binds indexes to the model."""
    import zlib

    return zlib.crc32(checkpoint_payload(params))


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    binio.write_framed(path, binio.CHECKPOINT_MAGIC, checkpoint_payload(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    _, payload = binio.read_framed(path, binio.CHECKPOINT_MAGIC)
    r = binio.PayloadReader(payload, str(path))
    cfg = EncoderConfig(
        vocab_size=r.u32(),
        layers=r.u32(),
        hidden=r.u32(),
        heads=r.u32(),
        ffn_dim=r.u32(),
        max_text_len=r.u32(),
        feature_dim=r.u32(),
        dropout=r.f32(),
    )
    count = r.u32()
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        name = r.string()
        rows = r.u32()
        cols = r.u32()
        data = np.frombuffer(r.raw(rows * cols * 4), dtype="<f4").reshape(rows, cols)
        tensors[name] = ad.leaf(data.copy())
    r.expect_done()
    return ModelParams(config=cfg, tensors=tensors)
