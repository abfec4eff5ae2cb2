"""The full network: context self-attention, target/aspect Bi-GRU, capsule
visual encoding, image-region attention, cross-modal interaction, fusion,
and the softmax classifier, plus the training loss and checkpoint I/O.

Every trainable tensor is reachable through ``EFNetParams.named_parameters``
under a stable name; the optimizer, the L2 term, and the checkpoint format
all iterate exactly that list. In text_only mode the visual parameters are
never created, so their gradients are structurally absent rather than zero.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as ly
from . import tensor as tx
from .data import FormatError, InputError, load_image_features
from .layers import (
    REGION_COUNT,
    CapsuleParams,
    ConfigError,
    GRUParams,
    MHAParams,
    PositionTable,
)
from .tensor import MaskError, ShapeError, TapeError, Tensor

NUM_CLASSES = 3

CHECKPOINT_MAGIC = b"EFCK"
CHECKPOINT_VERSION = 1


class InternalError(RuntimeError):
    """An internal invariant was violated; indicates a defect, not bad input."""


class CheckpointMismatch(ValueError):
    """Checkpoint contents disagree with the model's parameter names/shapes."""


@dataclass
class ModelConfig:
    embed_dim: int = 50
    hidden_dim: int = 32
    head_count: int = 4
    capsule_dim: int = 16
    att_dim: int = 32
    dropout: float = 0.3
    l2_lambda: float = 1e-5
    max_len: int = 36
    text_only: bool = False
    seed: int = 0
    precision: str = "single"

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    @property
    def context_width(self) -> int:
        # word and position embeddings share a width and are concatenated
        return 2 * self.embed_dim

    @property
    def target_width(self) -> int:
        return 2 * self.hidden_dim

    @property
    def fused_width(self) -> int:
        base = self.context_width + self.target_width
        return base if self.text_only else base + self.att_dim

    def validate(self) -> None:
        for field in ("embed_dim", "hidden_dim", "capsule_dim", "att_dim", "max_len"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.head_count < 1:
            raise ConfigError(f"head_count must be >= 1, got {self.head_count}")
        for width, what in ((self.context_width, "context"), (self.target_width, "target")):
            if width % self.head_count != 0:
                raise ConfigError(
                    f"head count {self.head_count} does not divide the {what} width {width}"
                )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.l2_lambda < 0.0:
            raise ConfigError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be single or double, got {self.precision!r}")


@dataclass
class AttentionTrace:
    """Detached attention weights captured during one forward pass."""

    interaction_heads: list
    fusion_heads: list
    image_grid: np.ndarray | None


@dataclass
class ForwardOutput:
    probs: Tensor
    logits: Tensor
    trace: AttentionTrace | None = None


@dataclass
class EFNetParams:
    embed: Tensor
    pos: PositionTable
    ctx_mhsa: MHAParams
    gru_fwd: GRUParams
    gru_bwd: GRUParams
    inter_ctx: MHAParams
    fusion: MHAParams
    cls_w: Tensor
    cls_b: Tensor
    capsule: CapsuleParams | None = None
    inter_img: MHAParams | None = None
    img_w_ta: Tensor | None = None
    img_w_r: Tensor | None = None

    @classmethod
    def create(cls, config: ModelConfig, rng, embed_matrix: Tensor) -> "EFNetParams":
        config.validate()
        dtype = config.dtype
        if embed_matrix.data.ndim != 2 or embed_matrix.shape[1] != config.embed_dim:
            raise ConfigError(
                f"embedding matrix is {embed_matrix.shape}, expected [V x {config.embed_dim}]"
            )
        if embed_matrix.data.dtype != dtype:
            embed_matrix = Tensor(embed_matrix.data.astype(dtype), requires_grad=True)
        d_c = config.context_width
        d_t = config.target_width
        params = cls(
            embed=embed_matrix,
            pos=PositionTable.create(rng, config.max_len, config.embed_dim, dtype),
            ctx_mhsa=MHAParams.create(rng, config.head_count, d_c, d_c, d_c, dtype),
            gru_fwd=GRUParams.create(rng, d_c, config.hidden_dim, dtype),
            gru_bwd=GRUParams.create(rng, d_c, config.hidden_dim, dtype),
            inter_ctx=MHAParams.create(rng, config.head_count, d_t, d_c, d_t, dtype),
            fusion=MHAParams.create(rng, config.head_count, d_t, d_t, d_t, dtype),
            cls_w=ly.glorot(rng, config.fused_width, NUM_CLASSES, dtype),
            cls_b=ly.zeros_param(NUM_CLASSES, dtype),
        )
        if not config.text_only:
            params.capsule = CapsuleParams.create(rng, 2048, config.capsule_dim, dtype)
            params.img_w_ta = ly.glorot(rng, d_t, config.att_dim, dtype)
            params.img_w_r = ly.glorot(rng, 2048, config.att_dim, dtype)
            params.inter_img = MHAParams.create(
                rng, config.head_count, d_t, config.capsule_dim, d_t, dtype
            )
        return params

    def named_parameters(self) -> list:
        items = [("embed.table", self.embed), ("pos.rows", self.pos.rows)]
        items += _mha_items("ctx_mhsa", self.ctx_mhsa)
        items += _gru_items("gru_fwd", self.gru_fwd)
        items += _gru_items("gru_bwd", self.gru_bwd)
        if self.capsule is not None:
            items.append(("capsule.w", self.capsule.w))
            if self.capsule.b is not None:
                items.append(("capsule.b", self.capsule.b))
            items.append(("img_attn.w_ta", self.img_w_ta))
            items.append(("img_attn.w_r", self.img_w_r))
        items += _mha_items("inter_ctx", self.inter_ctx)
        if self.inter_img is not None:
            items += _mha_items("inter_img", self.inter_img)
        items += _mha_items("fusion", self.fusion)
        items += [("cls.w", self.cls_w), ("cls.b", self.cls_b)]
        return items


def _mha_items(prefix: str, params: MHAParams):
    out = []
    for i in range(params.head_count):
        out += [
            (f"{prefix}.h{i}.wq", params.wq[i]),
            (f"{prefix}.h{i}.wk", params.wk[i]),
            (f"{prefix}.h{i}.wv", params.wv[i]),
        ]
    return out


def _gru_items(prefix: str, params: GRUParams):
    names = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")
    return [(f"{prefix}.{n}", getattr(params, n)) for n in names]


# ---------------------------------------------------------------------------
# pipeline stages


def encode_context(word_embeds: Tensor, pos_embeds: Tensor, mask, params: MHAParams,
                   dropout_rate: float = 0.0, train: bool = False, rng=None):
    """Self-attend over [word, position] features; also return the masked mean."""
    x = tx.concat([word_embeds, pos_embeds], axis=-1)
    x = tx.dropout(x, dropout_rate, train, rng)
    h_c = ly.mhsa(x, params, mask=mask)
    return h_c, tx.mean_pool(h_c, mask)


def encode_visual(feature_ref, params: CapsuleParams):
    """Flatten the 7x7 feature grid to 49 region rows (row-major) and run
    them through the capsule projection. Accepts a file path or an already
    loaded array."""
    if isinstance(feature_ref, (str, Path)):
        feature_ref = load_image_features(feature_ref)
    values = feature_ref.data if isinstance(feature_ref, Tensor) else np.asarray(feature_ref)
    if values.ndim != 3:
        raise ShapeError(f"visual features must be rank 3, got shape {values.shape}")
    dtype = params.w.data.dtype
    regions = values.reshape(values.shape[0] * values.shape[1], values.shape[2])
    r = Tensor(np.ascontiguousarray(regions, dtype=dtype))
    return r, ly.capsule_layer(r, params)


def image_attention(h_ta: Tensor, r: Tensor, w_ta: Tensor, w_r: Tensor):
    """One query (pooled target encoding) attends over projected regions;
    keys and values are the same projection. Returns the attended vector
    and the 49 region weights."""
    if w_ta.shape[1] != w_r.shape[1]:
        raise ConfigError(
            f"image attention widths differ: {w_ta.shape[1]} vs {w_r.shape[1]}"
        )
    query = tx.matmul(tx.reshape(tx.mean_pool(h_ta), (1, h_ta.shape[1])), w_ta)
    keys = tx.matmul(r, w_r)
    out, weights = ly.scaled_dot_attention(query, keys, keys, return_weights=True)
    return tx.reshape(out, (out.shape[1],)), tx.reshape(weights, (weights.shape[1],))


def interact(h_ta: Tensor, h_c: Tensor, h_i, params: EFNetParams, ctx_mask=None,
             return_weights: bool = False):
    """Let the target encoding attend into the context and (when present)
    into the capsule regions."""
    h_tac, ctx_w = ly.multi_head(
        h_ta, h_c, h_c, params.inter_ctx, mask=ctx_mask, return_weights=True
    )
    h_tai = None
    if h_i is not None:
        if params.inter_img is None:
            raise ConfigError("visual input given but model has no visual parameters")
        h_tai = ly.multi_head(h_ta, h_i, h_i, params.inter_img)
    return (h_tac, h_tai, ctx_w) if return_weights else (h_tac, h_tai)


def fuse(h_ta: Tensor, h_tac: Tensor, h_tai, h_avg_c: Tensor, h_att_i,
         params: EFNetParams, dropout_rate: float = 0.0, train: bool = False,
         rng=None, return_weights: bool = False):
    """Cross-attend queries h^ta against keys h^tac with values h^tai (the
    asymmetric role split is deliberate), pool, and concatenate the pooled
    context, pooled fusion, and image-attention vectors."""
    values = h_tai if h_tai is not None else h_tac
    if values.shape[0] != h_tac.shape[0]:
        raise InternalError(
            f"fusion key/value row counts differ: {h_tac.shape[0]} vs {values.shape[0]}"
        )
    h_taci, weights = ly.multi_head(
        h_ta, h_tac, values, params.fusion, return_weights=True
    )
    parts = [h_avg_c, tx.mean_pool(h_taci)]
    if h_att_i is not None:
        parts.append(h_att_i)
    fused = tx.concat(parts, axis=-1)
    fused = tx.dropout(fused, dropout_rate, train, rng)
    return (fused, weights) if return_weights else fused


def classify(fused: Tensor, w_o: Tensor, b_o: Tensor) -> ForwardOutput:
    if fused.data.ndim != 1 or fused.shape[0] != w_o.shape[0]:
        raise ConfigError(
            f"classifier expects [{w_o.shape[0]}] input, got shape {fused.shape}"
        )
    row = tx.reshape(fused, (1, fused.shape[0]))
    logits = tx.add(tx.matmul(row, w_o), b_o)
    probs = tx.softmax(logits, axis=-1)
    return ForwardOutput(
        probs=tx.reshape(probs, (NUM_CLASSES,)),
        logits=tx.reshape(logits, (NUM_CLASSES,)),
    )


def loss(predictions, labels, params, l2_lambda: float) -> Tensor:
    """Mean cross-entropy of the true-class probabilities plus an L2 penalty
    over every named parameter. Probabilities are clamped at 1e-12 inside
    the log so a saturated softmax cannot produce a NaN."""
    if l2_lambda < 0.0:
        raise ConfigError(f"l2_lambda must be >= 0, got {l2_lambda}")
    if len(predictions) != len(labels) or not predictions:
        raise InputError("need one label per prediction, at least one of each")
    terms = []
    for probs, label in zip(predictions, labels):
        if not 0 <= label < NUM_CLASSES:
            raise InputError(f"label {label} outside {{0, 1, 2}}")
        row = tx.reshape(probs, (1, NUM_CLASSES))
        terms.append(tx.log(tx.slice_cols(row, label, label + 1), floor=1e-12))
    ce = tx.scale(tx.sum_all(tx.concat(terms, axis=0)), -1.0 / len(predictions))
    if l2_lambda == 0.0:
        return ce
    reg = tx.sum_squares([p for _, p in params.named_parameters()])
    return tx.add(ce, tx.scale(reg, l2_lambda))


@contextmanager
def _stage(name: str):
    try:
        yield
    except (ShapeError, MaskError, TapeError, ConfigError, InputError) as e:
        raise type(e)(f"{name}: {e}") from None


def forward(sample, params: EFNetParams, config: ModelConfig, train: bool = False,
            rng=None, want_trace: bool = False) -> ForwardOutput:
    """Run one encoded sample through the whole pipeline.

    ``sample`` carries token ids, mask, target span, aspect ids, an integer
    label, and (in multimodal mode) the loaded feature grid. Stage errors
    are re-raised with the stage name prefixed.
    """
    ids = np.asarray(sample.token_ids, dtype=np.int64)
    mask = np.asarray(sample.mask, dtype=bool)
    start, end = sample.span

    with _stage("encode_context"):
        word = tx.embedding_lookup(params.embed, ids)
        pos = ly.position_embeddings((start, end), len(ids), params.pos)
        h_c, h_avg_c = encode_context(
            word, pos, mask, params.ctx_mhsa, config.dropout, train, rng
        )

    with _stage("bigru_encode"):
        target = tx.embedding_lookup(params.embed, ids[start:end])
        aspect = tx.mean_pool(tx.embedding_lookup(params.embed, sample.aspect_ids))
        h_ta = ly.bigru_encode(target, aspect, params.gru_fwd, params.gru_bwd)

    h_i = None
    h_att = None
    grid = None
    if not config.text_only:
        with _stage("encode_visual"):
            if sample.features is None:
                raise InputError(f"sample {sample.id} has no image features")
            r, h_i = encode_visual(sample.features, params.capsule)
        with _stage("image_attention"):
            h_att, grid = image_attention(h_ta, r, params.img_w_ta, params.img_w_r)

    with _stage("interact"):
        h_tac, h_tai, inter_w = interact(
            h_ta, h_c, h_i, params, ctx_mask=mask, return_weights=True
        )

    with _stage("fuse"):
        fused, fusion_w = fuse(
            h_ta, h_tac, h_tai, h_avg_c, h_att, params,
            dropout_rate=config.dropout, train=train, rng=rng, return_weights=True,
        )

    with _stage("classify"):
        out = classify(fused, params.cls_w, params.cls_b)

    if want_trace:
        side = int(np.sqrt(REGION_COUNT))
        out.trace = AttentionTrace(
            interaction_heads=[w.data.copy() for w in inter_w],
            fusion_heads=[w.data.copy() for w in fusion_w],
            image_grid=None if grid is None else grid.data.reshape(side, side).copy(),
        )
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: EFNetParams) -> None:
    """Write every named parameter, in registry order, as float32 records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, p in params.named_parameters():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _read_checkpoint_records(blob: bytes, path) -> dict:
    def need(n, what):
        if offset + n > len(blob):
            raise FormatError(f"{path}: truncated {what}")

    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC!r}")
    offset = 4
    need(4, "version")
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    records: dict = {}
    while offset < len(blob):
        need(4, "record header")
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        need(name_len, "record name")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        need(4, "record rank")
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        need(4 * rank, "record dims")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(4 * count, "record payload")
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        if name in records:
            raise FormatError(f"{path}: duplicate record {name!r}")
        records[name] = values.reshape(dims)
    return records


def load_checkpoint(path, params: EFNetParams) -> None:
    """Load saved values into ``params`` in place. Structural damage raises
    a format error; any name/shape disagreement with the model raises
    CheckpointMismatch."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise InputError(f"cannot read checkpoint {path}: {e}") from None
    records = _read_checkpoint_records(blob, path)
    named = params.named_parameters()
    expected = {name for name, _ in named}
    extra = set(records) - expected
    missing = expected - set(records)
    if extra or missing:
        raise CheckpointMismatch(
            f"{path}: parameter names disagree with the model"
            + (f"; unexpected {sorted(extra)}" if extra else "")
            + (f"; missing {sorted(missing)}" if missing else "")
        )
    for name, p in named:
        values = records[name]
        if values.shape != p.data.shape:
            raise CheckpointMismatch(
                f"{path}: {name} has shape {values.shape}, model expects {p.data.shape}"
            )
        p.data = values.astype(p.data.dtype)
