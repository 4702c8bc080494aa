"""Cell embedding providers: a deterministic hash embedder for offline work
and a file-backed store of precomputed sentence embeddings.

Both map prompt sentences to fixed-dimension vectors. Missing cells (empty
prompts) embed to the zero vector, which the model masks out at pooling.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, StoreError, StoreMissError
from .prompts import PromptedSample

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_GOLDEN = 0x9E3779B97F4A7C15

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def _splitmix_uniform(seed: int, count: int) -> np.ndarray:
    """count splitmix64 outputs from `seed`, mapped into [-1, 1)."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    state = np.uint64(seed) + idx * np.uint64(_GOLDEN)
    z = (state ^ (state >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return (z.astype(np.float64) / 2.0**64) * 2.0 - 1.0


def hash_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic bag-of-tokens sentence embedding.

    Lowercase, split into ASCII alphanumeric runs; each token's FNV-1a hash
    (XOR seed) seeds a splitmix64 stream of dim values in [-1, 1); token
    vectors are mean-pooled and L2-normalized. Text with no tokens embeds to
    the zero vector. Bit-identical across platforms.
    """
    if dim < 1:
        raise DataError(f"embedding dim must be >= 1, got {dim}")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        return np.zeros(dim)
    acc = np.zeros(dim)
    for token in tokens:
        h = _fnv1a(token.encode("utf-8")) ^ (seed & _MASK64)
        acc += _splitmix_uniform(h, dim)
    vec = acc / len(tokens)
    norm = float(np.linalg.norm(vec))
    return vec / norm if norm > 0 else vec


class HashEmbedder:
    """Provider wrapper around hash_embed with a fixed (dim, seed)."""

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise DataError(f"embedding dim must be >= 1, got {dim}")
        self.dim = dim
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        return hash_embed(text, self.dim, self.seed)

    def describe(self) -> str:
        return f"hash(dim={self.dim},seed={self.seed})"


# ---------------------------------------------------------------------------
# CEMB v1 store: line 1 is a JSON header, then one JSON record per line with
# a sha256 content key and a float32-representable vector.

STORE_VERSION = "CEMB1"


def content_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class EmbeddingStore:
    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def normalized(self) -> bool:
        return bool(self.metadata.get("normalized", False))

    def __len__(self) -> int:
        return len(self.entries)


def write_store(entries, path, normalize: bool = False, producer: str = "cellformer",
                extra_metadata: dict | None = None) -> None:
    """Write (text, vector) pairs as a CEMB v1 file.

    Texts are keyed by content hash; duplicate texts collapse to one record.
    Vectors are rounded to float32 on write. With normalize=True each vector
    is L2-normalized first and the header records it.
    """
    records: dict[str, np.ndarray] = {}
    dim = None
    for text, vec in entries:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1:
            raise StoreError(f"expected 1-d vector for {text!r}, got shape {vec.shape}")
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise StoreError(
                f"inconsistent vector length for {text!r}: {vec.shape[0]} != {dim}"
            )
        if normalize:
            norm = float(np.linalg.norm(vec))
            if norm > 0:
                vec = vec / norm
        records.setdefault(content_key(text), np.asarray(vec, dtype=np.float32))
    if dim is None:
        raise StoreError("cannot write an empty store")
    header = {
        "version": STORE_VERSION,
        "dim": int(dim),
        "count": len(records),
        "normalized": bool(normalize),
        "producer": producer,
    }
    if extra_metadata:
        header.update(extra_metadata)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for key, vec in records.items():
            fh.write(json.dumps({"key": key, "vec": [float(x) for x in vec]}) + "\n")


def open_store(path) -> EmbeddingStore:
    """Load and validate a CEMB v1 file."""
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise StoreError(f"{path}: empty store file")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise StoreError(f"{path}: malformed header: {exc}") from None
        version = header.get("version")
        if version != STORE_VERSION:
            raise StoreError(
                f"{path}: unknown store version {version!r} "
                f"(expected {STORE_VERSION!r})"
            )
        for key in ("dim", "count", "normalized", "producer"):
            if key not in header:
                raise StoreError(f"{path}: header missing {key!r}")
        dim = int(header["dim"])
        entries: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                key, vec = record["key"], record["vec"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise StoreError(f"{path}: line {lineno}: malformed record: {exc}") from None
            if not re.fullmatch(r"[0-9a-f]{64}", key):
                raise StoreError(f"{path}: line {lineno}: bad key {key!r}")
            arr = np.asarray(vec, dtype=np.float32)
            if arr.shape != (dim,):
                raise StoreError(
                    f"{path}: line {lineno}: vector length {arr.shape} != dim {dim}"
                )
            entries[key] = arr
    if len(entries) != int(header["count"]):
        raise StoreError(
            f"{path}: header count {header['count']} != {len(entries)} records"
        )
    if header["normalized"]:
        for key, vec in entries.items():
            norm = float(np.linalg.norm(vec.astype(np.float64)))
            if abs(norm - 1.0) > 1e-4:
                raise StoreError(
                    f"{path}: record {key} norm {norm} violates normalized flag"
                )
    return EmbeddingStore(dim=dim, entries=entries, metadata=header)


def lookup(store: EmbeddingStore, text: str) -> np.ndarray:
    """Stored vector for a prompt; the empty prompt is the zero vector and
    never consults the store. Absent keys raise (no silent fallback)."""
    if text == "":
        return np.zeros(store.dim)
    key = content_key(text)
    try:
        return store.entries[key].astype(np.float64)
    except KeyError:
        raise StoreMissError(text) from None


class StoreProvider:
    """Provider backed by an opened EmbeddingStore."""

    def __init__(self, store: EmbeddingStore):
        self.store = store
        self.dim = store.dim

    def embed(self, text: str) -> np.ndarray:
        return lookup(self.store, text)

    def describe(self) -> str:
        return f"store(dim={self.dim},producer={self.store.metadata.get('producer')})"


# ---------------------------------------------------------------------------
# Sample embedding


@dataclass(frozen=True)
class EmbeddedSample:
    """m x d matrix of cell embeddings plus the presence mask; masked rows
    hold the all-zero missing sentinel."""

    matrix: np.ndarray
    mask: tuple[bool, ...]

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.mask):
            raise DataError(
                f"mask length {len(self.mask)} != row count {self.matrix.shape[0]}"
            )


def embed_sample(provider, sample: PromptedSample, row_index=None) -> EmbeddedSample:
    """Embed each present prompt; absent cells get the zero row."""
    m = len(sample.prompts)
    matrix = np.zeros((m, provider.dim))
    for j, (text, present) in enumerate(zip(sample.prompts, sample.presence)):
        if not present:
            continue
        try:
            matrix[j] = provider.embed(text)
        except StoreMissError:
            where = f"row {row_index}, " if row_index is not None else ""
            raise StoreMissError(text, context=f"{where}column {j}") from None
    return EmbeddedSample(matrix=matrix, mask=tuple(sample.presence))
