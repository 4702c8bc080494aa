"""The cell transformer encoder: a trainable adapter over frozen cell
embeddings, a stack of post-norm transformer encoder layers with no
positional encoding and no [CLS] row, and masked mean pooling into one
patient embedding per record.

Because nothing injects position information, every layer is permutation
equivariant and the pooled embedding is permutation invariant. Masked
(missing) cells carry the zero sentinel through attention and are dropped
only at pooling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .embedding import EmbeddedSample
from .errors import DataError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 768
    model_dim: int = 768
    layers: int = 6
    heads: int = 6
    ffn_dim: int | None = None  # defaults to 4 * model_dim
    adapter_trainable: bool = True

    def __post_init__(self):
        if min(self.input_dim, self.model_dim, self.layers, self.heads) < 1:
            raise DataError(f"encoder dims must be >= 1: {self}")
        if self.model_dim % self.heads != 0:
            raise DataError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.model_dim)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "model_dim": self.model_dim,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "adapter_trainable": self.adapter_trainable,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderConfig":
        return cls(**doc)


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(config: EncoderConfig, seed: int) -> dict[str, Parameter]:
    """Seeded parameter set: uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))
    weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d, ffn = config.model_dim, config.ffn_dim
    params: dict[str, Parameter] = {}

    def param(name, values, trainable=True):
        params[name] = Parameter(name=name, tensor=Tensor(values, op=f"param:{name}"),
                                 trainable=trainable)

    param("adapter.weight", _uniform_init(rng, config.input_dim, (config.input_dim, d)),
          trainable=config.adapter_trainable)
    param("adapter.bias", np.zeros(d), trainable=config.adapter_trainable)
    for i in range(config.layers):
        pre = f"layer{i}"
        for proj in ("w_q", "w_k", "w_v", "w_o"):
            param(f"{pre}.attn.{proj}", _uniform_init(rng, d, (d, d)))
        param(f"{pre}.ln1.gamma", np.ones(d))
        param(f"{pre}.ln1.beta", np.zeros(d))
        param(f"{pre}.ffn.w1", _uniform_init(rng, d, (d, ffn)))
        param(f"{pre}.ffn.b1", np.zeros(ffn))
        param(f"{pre}.ffn.w2", _uniform_init(rng, ffn, (ffn, d)))
        param(f"{pre}.ffn.b2", np.zeros(d))
        param(f"{pre}.ln2.gamma", np.ones(d))
        param(f"{pre}.ln2.beta", np.zeros(d))
    return params


class CellTransformer:
    """Encoder from an m x input_dim cell-embedding matrix to a d-vector."""

    def __init__(self, config: EncoderConfig, seed: int = 0,
                 params: dict[str, Parameter] | None = None):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed)

    @property
    def output_dim(self) -> int:
        return self.config.model_dim

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _p(self, name: str) -> Tensor:
        return self.params[name].tensor

    def adapter(self, z_raw: Tensor) -> Tensor:
        """Shared affine map from store-dim rows to model-dim rows. Zero
        (masked) rows land on the bias row; pooling re-masks them."""
        if z_raw.shape[1] != self.config.input_dim:
            raise ShapeError(
                f"adapter expects {self.config.input_dim} columns, got {z_raw.shape}"
            )
        return ad.add(ad.matmul(z_raw, self._p("adapter.weight")), self._p("adapter.bias"))

    def encoder_layer(self, z: Tensor, index: int, attn_mask: np.ndarray | None = None) -> Tensor:
        """One post-norm block: multi-head self-attention, add & layer norm,
        position-wise FFN, add & layer norm.

        attn_mask, when given, is an additive rows x rows matrix applied to
        every head's scores (used to keep batched samples independent).
        """
        cfg = self.config
        pre = f"layer{index}"
        d_k = cfg.head_dim
        q = ad.matmul(z, self._p(f"{pre}.attn.w_q"))
        k = ad.matmul(z, self._p(f"{pre}.attn.w_k"))
        v = ad.matmul(z, self._p(f"{pre}.attn.w_v"))
        heads = []
        for h in range(cfg.heads):
            cols = slice(h * d_k, (h + 1) * d_k)
            q_h = ad.slice_rows_cols(q, cols=cols)
            k_h = ad.slice_rows_cols(k, cols=cols)
            v_h = ad.slice_rows_cols(v, cols=cols)
            scores = ad.mul(ad.matmul(q_h, ad.transpose(k_h)), 1.0 / math.sqrt(d_k))
            if attn_mask is not None:
                scores = ad.add(scores, ad.constant(attn_mask))
            heads.append(ad.matmul(ad.softmax_rows(scores), v_h))
        attended = ad.matmul(ad.concat(heads, axis=1), self._p(f"{pre}.attn.w_o"))
        u = ad.layernorm_rows(
            ad.add(attended, z), self._p(f"{pre}.ln1.gamma"), self._p(f"{pre}.ln1.beta")
        )
        hidden = ad.relu(ad.add(ad.matmul(u, self._p(f"{pre}.ffn.w1")), self._p(f"{pre}.ffn.b1")))
        ffn_out = ad.add(ad.matmul(hidden, self._p(f"{pre}.ffn.w2")), self._p(f"{pre}.ffn.b2"))
        return ad.layernorm_rows(
            ad.add(ffn_out, u), self._p(f"{pre}.ln2.gamma"), self._p(f"{pre}.ln2.beta")
        )

    def encode_rows(self, z_raw: Tensor, attn_mask: np.ndarray | None = None) -> Tensor:
        z = self.adapter(z_raw)
        for i in range(self.config.layers):
            z = self.encoder_layer(z, i, attn_mask=attn_mask)
        return z

    def forward(self, sample: EmbeddedSample, post_encoder_hook=None) -> Tensor:
        """One record -> pooled patient embedding of shape (model_dim,).

        post_encoder_hook, when given, maps the final m x d tensor to a
        replacement before pooling (test instrumentation).
        """
        if not any(sample.mask):
            raise DataError("cannot pool an all-masked sample")
        o = self.encode_rows(ad.constant(sample.matrix))
        if post_encoder_hook is not None:
            o = post_encoder_hook(o)
        return ad.masked_mean_rows(o, np.asarray(sample.mask))

    def encode_batch(self, samples: list[EmbeddedSample]) -> Tensor:
        """Batch of same-width records -> B x d matrix of patient embeddings.

        Samples are stacked into one (B*m) x input_dim matrix; a block
        diagonal additive mask keeps attention within each record, and a
        constant pooling matrix performs each record's masked mean. The
        result is identical to per-sample forward() calls.
        """
        if not samples:
            raise DataError("encode_batch needs at least one sample")
        m = samples[0].matrix.shape[0]
        for s in samples:
            if s.matrix.shape[0] != m:
                raise ShapeError("encode_batch requires a fixed cell count")
            if not any(s.mask):
                raise DataError("cannot pool an all-masked sample")
        b = len(samples)
        stacked = np.concatenate([s.matrix for s in samples], axis=0)
        attn_mask = np.full((b * m, b * m), -np.inf)
        pool = np.zeros((b, b * m))
        for i, s in enumerate(samples):
            attn_mask[i * m:(i + 1) * m, i * m:(i + 1) * m] = 0.0
            mask = np.asarray(s.mask, dtype=float)
            pool[i, i * m:(i + 1) * m] = mask / mask.sum()
        o = self.encode_rows(ad.constant(stacked), attn_mask=attn_mask)
        return ad.matmul(ad.constant(pool), o)


class MLPBackbone:
    """Two-hidden-layer ReLU MLP over a fixed numeric featurization; the
    same classification heads sit on top of its second hidden layer."""

    def __init__(self, input_dim: int, hidden_dim: int = 64, seed: int = 0):
        if input_dim < 1 or hidden_dim < 1:
            raise DataError("MLP dims must be >= 1")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        rng = np.random.default_rng(seed)
        self.params = {}
        for name, fan_in, shape in (
            ("mlp.w1", input_dim, (input_dim, hidden_dim)),
            ("mlp.b1", input_dim, (hidden_dim,)),
            ("mlp.w2", hidden_dim, (hidden_dim, hidden_dim)),
            ("mlp.b2", hidden_dim, (hidden_dim,)),
        ):
            values = _uniform_init(rng, fan_in, shape) if name.endswith(("w1", "w2")) \
                else np.zeros(shape)
            self.params[name] = Parameter(name=name, tensor=Tensor(values, op=f"param:{name}"))

    @property
    def output_dim(self) -> int:
        return self.hidden_dim

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def encode_batch(self, features: np.ndarray) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise ShapeError(
                f"expected (batch, {self.input_dim}) features, got {features.shape}"
            )
        x = ad.constant(features)
        h1 = ad.relu(ad.add(ad.matmul(x, self.params["mlp.w1"].tensor),
                            self.params["mlp.b1"].tensor))
        return ad.relu(ad.add(ad.matmul(h1, self.params["mlp.w2"].tensor),
                              self.params["mlp.b2"].tensor))


# ---------------------------------------------------------------------------
# Checkpoints: a JSON header line {format, config, manifest}, then the
# parameters' float32 little-endian values concatenated in manifest order.

CHECKPOINT_FORMAT = "CFCKPT1"


def save_checkpoint(path, config: dict, params: list[Parameter]) -> None:
    manifest = [{"name": p.name, "shape": list(p.tensor.shape)} for p in params]
    header = {"format": CHECKPOINT_FORMAT, "config": config, "manifest": manifest}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for p in params:
            fh.write(np.ascontiguousarray(p.tensor.values, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (config, name -> float64 array); rejects malformed files."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: malformed checkpoint header: {exc}") from None
        if header.get("format") != CHECKPOINT_FORMAT:
            raise DataError(
                f"{path}: unknown checkpoint format {header.get('format')!r}"
            )
        blob = fh.read()
    values: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = blob[offset:offset + 4 * count]
        if len(raw) != 4 * count:
            raise DataError(f"{path}: truncated checkpoint at {entry['name']!r}")
        values[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        offset += 4 * count
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return header["config"], values


def restore_parameters(params: dict[str, Parameter], values: dict[str, np.ndarray]) -> None:
    """Load checkpoint values into an existing parameter set; name/shape
    mismatches are rejected."""
    missing = set(params) - set(values)
    extra = set(values) - set(params)
    if missing or extra:
        raise DataError(
            f"checkpoint manifest mismatch: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    for name, param in params.items():
        if values[name].shape != param.tensor.shape:
            raise DataError(
                f"checkpoint shape mismatch for {name!r}: "
                f"{values[name].shape} != {param.tensor.shape}"
            )
        param.tensor.values = values[name].copy()
        param.tensor.zero_grad()
