"""Vocabulary, caption tokenization/padding, feature-file IO, and the
synthetic scene corpus used for desk-scale experiments.

File formats owned by this module:

* Caption corpus: UTF-8 text, one record per line, ``image_id<TAB>caption``.
* Vocabulary: UTF-8 text, one token per line in id order (reserved tokens
  first, so line number == token id).
* Feature file: binary, magic ``CCF1`` | u32 count | u32 F | u32 G | u32 C
  (all little-endian), then per image: u16 id length, id bytes, F float32
  global values, G*G*C float32 spatial values in row-major cell order. A
  header with G == 0 or C == 0 means no spatial grids are stored. Values are
  float32 on disk and widened to float64 in memory.
"""

from __future__ import annotations

import string
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

START_TOKEN = "<S>"
END_TOKEN = "<E>"
UNK_TOKEN = "<UNK>"
START_ID = 0
END_ID = 1
UNK_ID = 2
RESERVED = (START_TOKEN, END_TOKEN, UNK_TOKEN)

FEATURE_MAGIC = b"CCF1"


class EmptyCorpusError(ValueError):
    """No captions supplied where at least one is required."""


class FormatError(ValueError):
    """A data file does not match its declared layout."""


class InvalidFeatureError(ValueError):
    """Image features contain non-finite values."""


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, delete punctuation characters."""
    out = []
    for raw in text.lower().split():
        tok = raw.translate(_PUNCT_TABLE)
        if tok:
            out.append(tok)
    return out


class Vocabulary:
    """Bijective token<->id map with fixed reserved ids 0/1/2."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:3]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.id_to_token: list[str] = list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def decode_id(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if tuple(tokens[:3]) != RESERVED:
            raise FormatError(f"vocabulary file {path} does not start with the reserved tokens")
        return cls(tokens)


def build_vocab(captions, min_count: int = 1) -> Vocabulary:
    """Keep tokens seen at least min_count times; the rest map to <UNK>.

    ``captions`` is an iterable of token lists. Ids are assigned after the
    reserved ones in (frequency descending, token ascending) order so the
    mapping is stable across runs.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    any_caption = False
    for caption in captions:
        any_caption = True
        counts.update(caption)
    if not any_caption:
        raise EmptyCorpusError("cannot build a vocabulary from zero captions")
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda tok: (-counts[tok], tok))
    return Vocabulary(list(RESERVED) + kept)


@dataclass(frozen=True)
class TokenSeq:
    """A caption padded to N+1 positions in both teacher-forcing views.

    ``input_ids`` is <S>, y1..yn followed by <E> padding; ``target_ids`` is
    y1..yn, <E> followed by <E> padding. Positions at index >= valid_len are
    padding and excluded from losses and metrics.
    """

    input_ids: np.ndarray
    target_ids: np.ndarray
    valid_len: int

    def __post_init__(self):
        if self.input_ids.shape != self.target_ids.shape:
            raise ValueError("input and target views must have equal length")
        if not 1 <= self.valid_len <= len(self.input_ids):
            raise ValueError(f"valid_len {self.valid_len} out of range")

    def __len__(self) -> int:
        return len(self.input_ids)

    @classmethod
    def from_token_ids(cls, ids, max_steps: int) -> "TokenSeq":
        ids = list(ids)[:max_steps]
        n = len(ids)
        pad = [END_ID] * (max_steps - n)
        return cls(
            input_ids=np.array([START_ID] + ids + pad, dtype=np.int64),
            target_ids=np.array(ids + [END_ID] + pad, dtype=np.int64),
            valid_len=n + 1,
        )


def encode(caption: list[str], vocab: Vocabulary, max_steps: int) -> TokenSeq:
    """Map tokens to ids, truncate to max_steps, and pad both views."""
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    ids = [vocab.encode_token(tok) for tok in caption[:max_steps]]
    return TokenSeq.from_token_ids(ids, max_steps)


def decode(ids, vocab: Vocabulary) -> list[str]:
    """Ids back to tokens, skipping a leading <S> and stopping at the first <E>."""
    ids = list(np.asarray(ids, dtype=np.int64))
    if ids and ids[0] == START_ID:
        ids = ids[1:]
    out = []
    for token_id in ids:
        if token_id == END_ID:
            break
        out.append(vocab.decode_id(int(token_id)))
    return out


@dataclass
class ImageFeatures:
    """Precomputed image descriptors: one global vector plus an optional
    G x G grid of C-dimensional spatial cells."""

    global_vec: np.ndarray
    spatial: np.ndarray | None = None

    def __post_init__(self):
        self.global_vec = np.asarray(self.global_vec, dtype=np.float64)
        if self.global_vec.ndim != 1:
            raise InvalidFeatureError(f"global feature must be 1-d, got {self.global_vec.shape}")
        if not np.all(np.isfinite(self.global_vec)):
            raise InvalidFeatureError("global feature contains non-finite values")
        if self.spatial is not None:
            self.spatial = np.asarray(self.spatial, dtype=np.float64)
            if self.spatial.ndim != 3 or self.spatial.shape[0] != self.spatial.shape[1]:
                raise InvalidFeatureError(f"spatial grid must be [G,G,C], got {self.spatial.shape}")
            if not np.all(np.isfinite(self.spatial)):
                raise InvalidFeatureError("spatial features contain non-finite values")

    def spatial_flat(self) -> np.ndarray:
        """Spatial grid as [G*G, C] in row-major cell order."""
        if self.spatial is None:
            raise InvalidFeatureError("no spatial features present")
        g, _, c = self.spatial.shape
        return self.spatial.reshape(g * g, c)


@dataclass
class CorpusRecord:
    image_id: str
    caption: list[str]
    features: ImageFeatures
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.caption:
            raise ValueError(f"record {self.image_id} has an empty caption")


# ---------------------------------------------------------------------------
# feature file IO


def write_features(features: dict[str, ImageFeatures], path) -> None:
    items = list(features.items())
    if not items:
        raise ValueError("refusing to write an empty feature file")
    f_dim = items[0][1].global_vec.shape[0]
    first_spatial = items[0][1].spatial
    if first_spatial is None:
        g_dim = c_dim = 0
    else:
        g_dim, _, c_dim = first_spatial.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", len(items), f_dim, g_dim, c_dim))
        for image_id, feat in items:
            if feat.global_vec.shape[0] != f_dim:
                raise ValueError(f"{image_id}: global dim {feat.global_vec.shape[0]} != header {f_dim}")
            has_spatial = feat.spatial is not None
            if has_spatial != (g_dim > 0) or (has_spatial and feat.spatial.shape != (g_dim, g_dim, c_dim)):
                raise ValueError(f"{image_id}: spatial shape inconsistent with header")
            raw = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(feat.global_vec.astype("<f4").tobytes())
            if has_spatial:
                fh.write(feat.spatial.astype("<f4").tobytes())


def read_features(path) -> dict[str, ImageFeatures]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset: int, count: int) -> bytes:
        if offset + count > len(blob):
            raise FormatError(f"{path}: truncated payload, needed {count} bytes at offset {offset}")
        return blob[offset:offset + count]

    if need(0, 4) != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    count, f_dim, g_dim, c_dim = struct.unpack("<IIII", need(4, 16))
    pos = 20
    out: dict[str, ImageFeatures] = {}
    for _ in range(count):
        (id_len,) = struct.unpack("<H", need(pos, 2))
        pos += 2
        image_id = need(pos, id_len).decode("utf-8")
        pos += id_len
        global_vec = np.frombuffer(need(pos, 4 * f_dim), dtype="<f4").astype(np.float64)
        pos += 4 * f_dim
        spatial = None
        if g_dim > 0 and c_dim > 0:
            n = g_dim * g_dim * c_dim
            spatial = (
                np.frombuffer(need(pos, 4 * n), dtype="<f4")
                .astype(np.float64)
                .reshape(g_dim, g_dim, c_dim)
            )
            pos += 4 * n
        out[image_id] = ImageFeatures(global_vec, spatial)
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes at offset {pos}")
    return out


# ---------------------------------------------------------------------------
# caption corpus IO


def write_caption_file(path, items) -> None:
    """``items`` is an iterable of (image_id, token list)."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, tokens in items:
            fh.write(f"{image_id}\t{' '.join(tokens)}\n")


def read_caption_file(path) -> list[tuple[str, list[str]]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'id<TAB>caption'")
            image_id, text = line.split("\t", 1)
            out.append((image_id, tokenize(text)))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus

SYNTH_COLORS = ("red", "blue", "green", "yellow", "purple", "orange")
SYNTH_OBJECTS = ("ball", "cube", "lamp", "bottle", "drum", "kite", "plant", "clock")
SYNTH_RELATIONS = ("on", "under", "near", "beside")
SYNTH_PLACES = ("table", "shelf", "floor", "bench", "desk")
SYNTH_BLOCK = 2  # object signature occupies a BLOCK x BLOCK cell patch


def caption_for_scene(color: str, obj: str, relation: str, place: str) -> list[str]:
    """The fixed template grammar: 'a red ball on the table'."""
    return ["a", color, obj, relation, "the", place]


def synth_corpus(
    num_scenes: int,
    seed: int,
    *,
    feature_dim: int = 96,
    grid_size: int = 4,
    spatial_channels: int = 64,
    noise: float = 0.05,
) -> tuple[list[CorpusRecord], Vocabulary]:
    """Deterministic scene/caption generator standing in for a real dataset.

    Each scene is a (color, object, relation, place) tuple rendered by the
    template grammar. The global vector is a fixed random projection of the
    one-hot (color, relation, place) encoding plus small noise; the object's
    identity is carried only by its signature, written into a random
    contiguous BLOCK x BLOCK patch of the spatial grid (the remaining cells
    hold the place's background signature). Localizing the object in the
    grid is what gives spatial attention real signal: a model without
    attention cannot resolve the object token.

    Record.meta stores the attribute tuple and the patch cells so tests can
    re-derive captions and measure attention mass.
    """
    if num_scenes < 1:
        raise ValueError(f"num_scenes must be >= 1, got {num_scenes}")
    rng = np.random.default_rng(seed)

    # Fixed tables first, so the per-scene stream is independent of their size.
    n_global_attrs = len(SYNTH_COLORS) + len(SYNTH_RELATIONS) + len(SYNTH_PLACES)
    projection = rng.normal(size=(n_global_attrs, feature_dim))
    object_sigs = rng.normal(size=(len(SYNTH_OBJECTS), spatial_channels))
    place_sigs = rng.normal(size=(len(SYNTH_PLACES), spatial_channels))

    records: list[CorpusRecord] = []
    for idx in range(num_scenes):
        ci = int(rng.integers(len(SYNTH_COLORS)))
        oi = int(rng.integers(len(SYNTH_OBJECTS)))
        ri = int(rng.integers(len(SYNTH_RELATIONS)))
        pi = int(rng.integers(len(SYNTH_PLACES)))
        row0 = int(rng.integers(grid_size - SYNTH_BLOCK + 1))
        col0 = int(rng.integers(grid_size - SYNTH_BLOCK + 1))

        one_hot = np.zeros(n_global_attrs)
        one_hot[ci] = 1.0
        one_hot[len(SYNTH_COLORS) + ri] = 1.0
        one_hot[len(SYNTH_COLORS) + len(SYNTH_RELATIONS) + pi] = 1.0
        global_vec = one_hot @ projection + noise * rng.normal(size=feature_dim)

        spatial = np.tile(place_sigs[pi], (grid_size, grid_size, 1))
        spatial += noise * rng.normal(size=spatial.shape)
        block = [
            (r, c)
            for r in range(row0, row0 + SYNTH_BLOCK)
            for c in range(col0, col0 + SYNTH_BLOCK)
        ]
        for r, c in block:
            spatial[r, c] = object_sigs[oi] + noise * rng.normal(size=spatial_channels)

        # Round through float32 so the feature file round-trips bit-exactly.
        feat = ImageFeatures(
            global_vec.astype("<f4").astype(np.float64),
            spatial.astype("<f4").astype(np.float64),
        )
        color, obj = SYNTH_COLORS[ci], SYNTH_OBJECTS[oi]
        relation, place = SYNTH_RELATIONS[ri], SYNTH_PLACES[pi]
        records.append(
            CorpusRecord(
                image_id=f"scene{idx:05d}",
                caption=caption_for_scene(color, obj, relation, place),
                features=feat,
                meta={
                    "color": color,
                    "object": obj,
                    "relation": relation,
                    "place": place,
                    "block": block,
                },
            )
        )
    vocab = build_vocab((r.caption for r in records), min_count=1)
    return records, vocab
