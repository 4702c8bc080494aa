"""Sentence-encoder backends.

A backend exposes `dim` and `token_embeddings(text, max_tokens)` returning
one vector per token (truncated at max_tokens); pooling happens in the
export step. Two backends exist: a real pre-trained transformer loaded via
Hugging Face, and a deterministic stub for offline testing.
"""

from __future__ import annotations

import hashlib

import numpy as np

DEFAULT_MODEL = "princeton-nlp/sup-simcse-roberta-base"
STUB_PREFIX = "stub"
STUB_DIM = 768


class ModelLoadError(Exception):
    pass


class HuggingFaceEncoder:
    """Frozen pre-trained encoder; token embeddings are the final hidden
    states (inference only, no sampling, no fine-tuning)."""

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise ModelLoadError(
                f"torch/transformers unavailable for model {model_id!r}: {exc}"
            ) from None
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(model_id)
            self._model = AutoModel.from_pretrained(model_id)
        except Exception as exc:
            raise ModelLoadError(f"cannot load model {model_id!r}: {exc}") from None
        self._torch = torch
        self._model.eval()
        self.dim = int(self._model.config.hidden_size)
        self.model_id = model_id

    def token_embeddings(self, text: str, max_tokens: int) -> np.ndarray:
        inputs = self._tokenizer(text, truncation=True, max_length=max_tokens,
                                 return_tensors="pt")
        with self._torch.no_grad():
            hidden = self._model(**inputs).last_hidden_state[0]
        return hidden.cpu().numpy().astype(np.float64)


class StubEncoder:
    """Deterministic offline stand-in: a start token plus whitespace tokens,
    each mapped to a fixed pseudo-random vector from its content digest."""

    def __init__(self, dim: int = STUB_DIM):
        if dim < 1:
            raise ModelLoadError(f"stub dim must be >= 1, got {dim}")
        self.dim = dim
        self.model_id = f"{STUB_PREFIX}:{dim}"

    def token_embeddings(self, text: str, max_tokens: int) -> np.ndarray:
        tokens = (["<s>"] + text.split())[:max_tokens]
        rows = []
        for token in tokens:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "big")
            rows.append(np.random.default_rng(seed).uniform(-1, 1, size=self.dim))
        return np.stack(rows)


def resolve_encoder(model_id: str):
    """"stub" or "stub:<dim>" selects the offline backend; anything else is
    treated as a Hugging Face model identifier."""
    if model_id == STUB_PREFIX:
        return StubEncoder()
    if model_id.startswith(STUB_PREFIX + ":"):
        try:
            dim = int(model_id.split(":", 1)[1])
        except ValueError:
            raise ModelLoadError(f"bad stub spec {model_id!r}") from None
        return StubEncoder(dim)
    return HuggingFaceEncoder(model_id)
