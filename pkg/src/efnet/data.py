"""Ingestion and serialization: embedding tables, JSONL datasets, binary
region-feature files, batching with span-preserving truncation, and the
planted-rule synthetic corpus generator.

All binary payloads are little-endian; all text is UTF-8.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor

LABELS = ("negative", "neutral", "positive")
PAD_INDEX = 0
UNK_INDEX = 1

FEATURE_MAGIC = b"EFVF"
FEATURE_VERSION = 1
FEATURE_SHAPE = (7, 7, 2048)

BRIGHT_CELLS = ((1, 1), (3, 3), (5, 5))
CUE_TOKENS = ("negcue", "neucue", "poscue")


class InputError(ValueError):
    """Input data is missing or unusable (empty file, absent feature, ...)."""


class ParseError(ValueError):
    """A text input (embeddings, dataset) is malformed; names the location."""


class FormatError(ValueError):
    """A binary file violates its layout; names the offending field."""


@dataclass
class Sample:
    id: str
    tokens: list
    target_span: tuple[int, int]
    aspect_tokens: list
    label: int
    image_ref: str | None = None


@dataclass
class EncodedSample:
    """A sample resolved to indices and arrays, ready for the model."""

    id: str
    token_ids: np.ndarray
    mask: np.ndarray
    span: tuple[int, int]
    aspect_ids: np.ndarray
    label: int
    features: np.ndarray | None = None


class EmbeddingTable:
    """Token to row map over a trainable matrix.

    Row 0 is padding (all zero, re-zeroed by the optimizer after each step)
    and row 1 is the unknown-token fallback, so lookup never fails.
    """

    def __init__(self, index: dict, matrix: Tensor):
        self.index = index
        self.matrix = matrix

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK_INDEX)

    def token_ids(self, tokens) -> np.ndarray:
        return np.array([self.lookup(t) for t in tokens], dtype=np.int64)


def load_embeddings(path, rng=None, dtype=DEFAULT_DTYPE) -> EmbeddingTable:
    """Read "token v1 ... vd" lines into a table with pad/unk rows prepended.

    The unknown row is drawn uniform in +-0.05 from ``rng`` (a fixed default
    generator when omitted, so loading stays deterministic).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    index: dict = {}
    rows = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                if not values:
                    raise ParseError(f"line {lineno}: no embedding values")
                dim = len(values)
            if len(values) != dim:
                raise ParseError(
                    f"line {lineno}: expected {dim} values, got {len(values)}"
                )
            if token in index:
                raise ParseError(f"line {lineno}: duplicate token {token!r}")
            try:
                row = [float(v) for v in values]
            except ValueError:
                raise ParseError(f"line {lineno}: non-numeric embedding value") from None
            index[token] = len(rows) + 2
            rows.append(row)
    if dim is None:
        raise InputError(f"embedding file {path} is empty")
    matrix = np.zeros((len(rows) + 2, dim), dtype=dtype)
    matrix[UNK_INDEX] = rng.uniform(-0.05, 0.05, size=dim).astype(dtype)
    matrix[2:] = np.asarray(rows, dtype=dtype)
    return EmbeddingTable(index, Tensor(matrix, requires_grad=True))


def _parse_record(i: int, obj) -> Sample:
    def fail(why):
        raise ParseError(f"record {i}: {why}")

    if not isinstance(obj, dict):
        fail("not an object")
    for key in ("id", "tokens", "target", "aspect", "label"):
        if key not in obj:
            fail(f"missing field {key!r}")
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not tokens or not all(isinstance(t, str) for t in tokens):
        fail("tokens must be a non-empty list of strings")
    target = obj["target"]
    if not isinstance(target, dict) or "start" not in target or "end" not in target:
        fail("target must carry start and end")
    start, end = target["start"], target["end"]
    if not (isinstance(start, int) and isinstance(end, int) and 0 <= start < end <= len(tokens)):
        fail(f"target span [{start}, {end}) out of range for {len(tokens)} tokens")
    aspect = obj["aspect"]
    if not isinstance(aspect, list) or not aspect or not all(isinstance(t, str) for t in aspect):
        fail("aspect must be a non-empty list of strings")
    if obj["label"] not in LABELS:
        fail(f"unknown label {obj['label']!r}")
    image = obj.get("image")
    if image is not None and not isinstance(image, str):
        fail("image must be a path string")
    return Sample(
        id=str(obj["id"]),
        tokens=tokens,
        target_span=(start, end),
        aspect_tokens=aspect,
        label=LABELS.index(obj["label"]),
        image_ref=image,
    )


def load_dataset(path) -> list:
    """Read newline-delimited records; image paths resolve against the file's
    directory so downstream loaders can open them as-is."""
    base = Path(path).parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                raise ParseError(f"record {i}: not valid JSON") from None
            sample = _parse_record(i, obj)
            if sample.image_ref is not None:
                sample.image_ref = str(base / sample.image_ref)
            samples.append(sample)
    return samples


def write_dataset(path, samples) -> None:
    """Inverse of load_dataset; image paths are stored relative to ``path``."""
    base = Path(path).parent
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            obj = {
                "id": s.id,
                "tokens": s.tokens,
                "target": {"start": s.target_span[0], "end": s.target_span[1]},
                "aspect": s.aspect_tokens,
                "label": LABELS[s.label],
            }
            if s.image_ref is not None:
                obj["image"] = os.path.relpath(s.image_ref, base)
            fh.write(json.dumps(obj) + "\n")


def load_image_features(path) -> Tensor:
    """Read one region-feature file (magic EFVF, version 1, dims 7x7x2048)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise InputError(f"cannot read feature file {path}: {e}") from None
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {FEATURE_MAGIC!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header (version/ndims)")
    version, ndims = struct.unpack_from("<II", blob, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if ndims != 3:
        raise FormatError(f"{path}: ndims must be 3, got {ndims}")
    if len(blob) < 24:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from("<III", blob, 12)
    if dims != FEATURE_SHAPE:
        raise FormatError(f"{path}: dims {dims} do not match {FEATURE_SHAPE}")
    expected = 24 + 4 * int(np.prod(FEATURE_SHAPE))
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload is {len(blob) - 24} bytes, expected {expected - 24}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=24).reshape(FEATURE_SHAPE)
    return Tensor(values.copy())


def write_image_features(path, values) -> None:
    arr = np.asarray(values, dtype="<f4")
    if arr.shape != FEATURE_SHAPE:
        raise FormatError(f"feature payload must be {FEATURE_SHAPE}, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", FEATURE_VERSION, 3))
        fh.write(struct.pack("<III", *FEATURE_SHAPE))
        fh.write(arr.tobytes())


def _truncate(tokens, span, max_len):
    """Window of at most max_len tokens centered on (and containing) the span."""
    n = len(tokens)
    if n <= max_len:
        return tokens, span
    start, end = span
    lo = (start + end) // 2 - max_len // 2
    lo = max(0, min(lo, n - max_len))
    lo = min(lo, start)
    lo = max(lo, end - max_len)
    return tokens[lo : lo + max_len], (start - lo, end - lo)


def encode_sample(sample: Sample, table: EmbeddingTable, max_len: int, with_features: bool) -> EncodedSample:
    start, end = sample.target_span
    if end - start > max_len:
        raise InputError(f"sample {sample.id}: target span exceeds max_len {max_len}")
    tokens, span = _truncate(sample.tokens, sample.target_span, max_len)
    features = None
    if with_features:
        if sample.image_ref is None:
            raise InputError(f"sample {sample.id}: no image in multimodal mode")
        features = load_image_features(sample.image_ref).data
    return EncodedSample(
        id=sample.id,
        token_ids=table.token_ids(tokens),
        mask=np.ones(len(tokens), dtype=bool),
        span=span,
        aspect_ids=table.token_ids(sample.aspect_tokens),
        label=sample.label,
        features=features,
    )


@dataclass
class Batch:
    ids: list
    token_ids: np.ndarray
    mask: np.ndarray
    spans: list
    aspect_ids: list
    labels: np.ndarray
    features: list

    def __len__(self) -> int:
        return len(self.ids)

    def item(self, i: int) -> EncodedSample:
        return EncodedSample(
            id=self.ids[i],
            token_ids=self.token_ids[i],
            mask=self.mask[i],
            span=self.spans[i],
            aspect_ids=self.aspect_ids[i],
            label=int(self.labels[i]),
            features=self.features[i],
        )


def make_batches(samples, table: EmbeddingTable, config, rng) -> list:
    """Shuffle, chunk, and pad. ``config`` supplies batch_size, max_len, and
    text_only; the last batch may be ragged. Padding rows use index 0 with
    mask False."""
    with_features = not config.text_only
    order = rng.permutation(len(samples))
    encoded = [encode_sample(samples[i], table, config.max_len, with_features) for i in order]
    batches = []
    for at in range(0, len(encoded), config.batch_size):
        chunk = encoded[at : at + config.batch_size]
        width = max(len(e.token_ids) for e in chunk)
        ids_mat = np.full((len(chunk), width), PAD_INDEX, dtype=np.int64)
        mask = np.zeros((len(chunk), width), dtype=bool)
        for r, e in enumerate(chunk):
            ids_mat[r, : len(e.token_ids)] = e.token_ids
            mask[r, : len(e.token_ids)] = True
        batches.append(
            Batch(
                ids=[e.id for e in chunk],
                token_ids=ids_mat,
                mask=mask,
                spans=[e.span for e in chunk],
                aspect_ids=[e.aspect_ids for e in chunk],
                labels=np.array([e.label for e in chunk], dtype=np.int64),
                features=[e.features for e in chunk],
            )
        )
    return batches


def synth_generate(out_dir, seed: int, n: int, vocab_size: int = 40,
                   grid_rule: str = "both", embed_dim: int = 50) -> dict:
    """Write a corpus whose labels follow a planted, machine-checkable rule.

    grid_rule picks where the signal lives: "none" puts it in a cue token
    next to the target (text only, no images), "cell" in which of three
    fixed feature-grid cells is bright, "both" in (cue + cell) mod 3.
    The rule is written out as rule.json so a test can relabel the corpus
    independently. Everything derives from ``seed``; a fixed seed fixes
    every output byte.
    """
    if grid_rule not in ("none", "cell", "both"):
        raise InputError(f"unknown grid_rule {grid_rule!r}")
    if n < 0:
        raise InputError(f"sample count must be >= 0, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    vocab = [f"w{i}" for i in range(vocab_size)]
    with open(out / "embeddings.txt", "w", encoding="utf-8") as fh:
        for token in list(CUE_TOKENS) + vocab:
            vec = rng.uniform(-0.5, 0.5, size=embed_dim)
            fh.write(token + " " + " ".join(f"{v:.6f}" for v in vec) + "\n")

    with_images = grid_rule in ("cell", "both")
    if with_images and n > 0:
        (out / "features").mkdir(exist_ok=True)

    samples = []
    for i in range(n):
        sid = f"s{i:04d}"
        length = int(np.clip(round(rng.normal(13.0, 3.0)), 5, 30))
        tokens = [vocab[j] for j in rng.integers(0, vocab_size, size=length)]
        span_len = int(rng.integers(1, 3))
        start = int(rng.integers(0, length - span_len + 1))
        span = (start, start + span_len)
        aspect = [vocab[int(rng.integers(0, vocab_size))]]

        cue = int(rng.integers(0, 3)) if grid_rule in ("none", "both") else None
        cell = int(rng.integers(0, 3)) if with_images else None
        if grid_rule == "none":
            label = cue
        elif grid_rule == "cell":
            label = cell
        else:
            label = (cue + cell) % 3

        if cue is not None:
            # keep the cue adjacent to the span so truncation cannot drop it
            if rng.random() < 0.5 and span[0] > 0:
                tokens.insert(span[0] - 1, CUE_TOKENS[cue])
                span = (span[0] + 1, span[1] + 1)
            else:
                tokens.insert(span[1], CUE_TOKENS[cue])

        image_ref = None
        if with_images:
            feats = rng.uniform(0.0, 0.1, size=FEATURE_SHAPE).astype(np.float32)
            r, c = BRIGHT_CELLS[cell]
            # brighten one cell on a cell-specific channel band; region
            # attention is content-based, so the class signal must live in
            # the channels, not in the grid position alone
            band = FEATURE_SHAPE[2] // 3
            at = cell * band
            feats[r, c, at : at + band] = rng.uniform(
                0.9, 1.0, size=band).astype(np.float32)
            image_ref = str(out / "features" / f"{sid}.efvf")
            write_image_features(image_ref, feats)

        samples.append(
            Sample(
                id=sid, tokens=tokens, target_span=span,
                aspect_tokens=aspect, label=int(label), image_ref=image_ref,
            )
        )

    write_dataset(out / "dataset.jsonl", samples)
    rule = {
        "grid_rule": grid_rule,
        "cue_tokens": list(CUE_TOKENS),
        "bright_cells": [list(rc) for rc in BRIGHT_CELLS],
        "formula": {
            "none": "label = index of the cue token present in the sentence",
            "cell": "label = index of the bright grid cell (bright on its own channel band)",
            "both": "label = (cue index + cell index) mod 3",
        }[grid_rule],
    }
    with open(out / "rule.json", "w", encoding="utf-8") as fh:
        json.dump(rule, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rule
