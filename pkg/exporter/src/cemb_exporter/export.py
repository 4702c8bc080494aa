"""Encode a prompt dump into a CEMB v1 store.

Identical prompt texts are deduplicated by content hash, each unique prompt
is encoded once (token embeddings truncated at max_tokens, then
mean-pooled), and the store is written atomically (temp file + rename).
The header records the model identifier and the truncation length.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import __version__
from .encoders import DEFAULT_MODEL, resolve_encoder
from .prompts_io import read_prompt_file

STORE_VERSION = "CEMB1"


class ExportError(Exception):
    pass


@dataclass(frozen=True)
class ExportJob:
    prompts_path: str
    out_path: str
    model: str = DEFAULT_MODEL
    max_tokens: int = 128
    normalize: bool = False

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ExportError(f"max_tokens must be >= 1, got {self.max_tokens}")


def content_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def export(job: ExportJob) -> dict:
    """Run the job; returns a summary {count, dim, path}."""
    entries = read_prompt_file(job.prompts_path)
    if not entries:
        raise ExportError(f"{job.prompts_path}: no prompts to export")
    unique: dict[str, str] = {}
    for _, _, text in entries:
        unique.setdefault(content_key(text), text)

    encoder = resolve_encoder(job.model)
    records: dict[str, np.ndarray] = {}
    for key, text in unique.items():
        tokens = encoder.token_embeddings(text, job.max_tokens)
        vec = tokens.mean(axis=0)
        if job.normalize:
            norm = float(np.linalg.norm(vec))
            if norm > 0:
                vec = vec / norm
        records[key] = np.asarray(vec, dtype=np.float32)

    header = {
        "version": STORE_VERSION,
        "dim": int(encoder.dim),
        "count": len(records),
        "normalized": bool(job.normalize),
        "producer": f"cemb-exporter/{__version__}",
        "model": job.model,
        "max_tokens": int(job.max_tokens),
    }
    out_dir = os.path.dirname(os.path.abspath(job.out_path)) or "."
    fd, tmp_path = tempfile.mkstemp(prefix=".cemb-", dir=out_dir)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for key, vec in records.items():
                fh.write(json.dumps({"key": key, "vec": [float(x) for x in vec]}) + "\n")
        os.replace(tmp_path, job.out_path)
    except OSError as exc:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise ExportError(f"cannot write store {job.out_path}: {exc}") from None
    return {"count": len(records), "dim": int(encoder.dim), "path": job.out_path}
