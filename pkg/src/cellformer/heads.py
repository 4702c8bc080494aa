"""Ordinal classification heads over the patient embedding.

Three interchangeable heads, each a two-layer feed-forward network:

* "ce"    - plain K-way softmax classification.
* "or"    - K-1 independent two-neuron binary subtasks, task k predicting
            "rank > k"; decoding counts confident subtasks.
* "coral" - K-1 binary tasks sharing one weight vector with independent
            biases, which makes task probabilities rank-consistent whenever
            the biases are sorted descending.

Batched OR outputs are a B x 2(K-1) matrix whose columns (2k, 2k+1) hold
task k's (label-0, label-1) logits. All losses are computed in log space.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DataError, ShapeError
from .model import _uniform_init


def expand_targets(rank: int, num_ranks: int) -> list[int]:
    """Binary subtask targets for one rank: target_k = 1 iff rank > k."""
    if not 0 <= rank < num_ranks:
        raise DataError(f"rank {rank} out of range for K={num_ranks}")
    return [1 if rank > k else 0 for k in range(num_ranks - 1)]


def _target_matrix(ranks, num_ranks: int) -> np.ndarray:
    return np.array([expand_targets(r, num_ranks) for r in ranks], dtype=float)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


# ---------------------------------------------------------------------------
# Head modules


class _FeedForwardHead:
    """Shared two-layer body: hidden = relu(p W_h + b_h), then a
    head-specific output layer."""

    kind = ""

    def __init__(self, input_dim: int, num_ranks: int,
                 hidden_dim: int | None = None, seed: int = 0):
        if num_ranks < 2:
            raise DataError(f"need K >= 2 ranks, got {num_ranks}")
        self.input_dim = input_dim
        self.num_ranks = num_ranks
        self.hidden_dim = hidden_dim or input_dim
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        self._param("head.w_h", _uniform_init(rng, input_dim, (input_dim, self.hidden_dim)))
        self._param("head.b_h", np.zeros(self.hidden_dim))
        self._init_output(rng)

    def _param(self, name, values):
        self.params[name] = Parameter(name=name, tensor=Tensor(values, op=f"param:{name}"))

    def _init_output(self, rng):
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def body(self, p: Tensor) -> Tensor:
        if p.values.ndim != 2 or p.shape[1] != self.input_dim:
            raise ShapeError(
                f"head expects (batch, {self.input_dim}) input, got {p.shape}"
            )
        return ad.relu(ad.add(ad.matmul(p, self.params["head.w_h"].tensor),
                              self.params["head.b_h"].tensor))


class CrossEntropyHead(_FeedForwardHead):
    kind = "ce"

    def _init_output(self, rng):
        self._param("head.w_out",
                    _uniform_init(rng, self.hidden_dim, (self.hidden_dim, self.num_ranks)))
        self._param("head.b_out", np.zeros(self.num_ranks))

    def forward(self, p: Tensor) -> Tensor:
        return ad.add(ad.matmul(self.body(p), self.params["head.w_out"].tensor),
                      self.params["head.b_out"].tensor)

    def loss(self, outputs: Tensor, ranks) -> Tensor:
        return ce_loss(outputs, ranks)

    def decode(self, output_values: np.ndarray) -> np.ndarray:
        return ce_decode(output_values)

    def probabilities(self, output_values: np.ndarray) -> np.ndarray:
        shifted = output_values - output_values.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


class OrdinalHead(_FeedForwardHead):
    kind = "or"

    def _init_output(self, rng):
        width = 2 * (self.num_ranks - 1)
        self._param("head.w_out",
                    _uniform_init(rng, self.hidden_dim, (self.hidden_dim, width)))
        self._param("head.b_out", np.zeros(width))

    def forward(self, p: Tensor) -> Tensor:
        return ad.add(ad.matmul(self.body(p), self.params["head.w_out"].tensor),
                      self.params["head.b_out"].tensor)

    def loss(self, outputs: Tensor, ranks) -> Tensor:
        return or_loss(outputs, ranks)

    def decode(self, output_values: np.ndarray) -> np.ndarray:
        return or_decode(output_values)

    def probabilities(self, output_values: np.ndarray) -> np.ndarray:
        return or_probabilities(output_values)


class CoralHead(_FeedForwardHead):
    kind = "coral"

    def _init_output(self, rng):
        self._param("head.w_shared",
                    _uniform_init(rng, self.hidden_dim, (self.hidden_dim, 1)))
        # independent biases, initialized sorted descending
        self._param("head.biases", np.linspace(1.0, -1.0, self.num_ranks - 1))

    def forward(self, p: Tensor) -> Tensor:
        score = ad.matmul(self.body(p), self.params["head.w_shared"].tensor)  # (B, 1)
        return ad.add(score, self.params["head.biases"].tensor)  # (B, K-1)

    def loss(self, outputs: Tensor, ranks) -> Tensor:
        return coral_loss(outputs, ranks)

    def decode(self, output_values: np.ndarray) -> np.ndarray:
        return coral_decode(output_values)

    def probabilities(self, output_values: np.ndarray) -> np.ndarray:
        return _sigmoid(output_values)


HEAD_KINDS = {"ce": CrossEntropyHead, "or": OrdinalHead, "coral": CoralHead}


def make_head(kind: str, input_dim: int, num_ranks: int,
              hidden_dim: int | None = None, seed: int = 0) -> _FeedForwardHead:
    try:
        cls = HEAD_KINDS[kind]
    except KeyError:
        raise DataError(f"unknown head kind {kind!r} (expected ce|or|coral)") from None
    return cls(input_dim, num_ranks, hidden_dim=hidden_dim, seed=seed)


# ---------------------------------------------------------------------------
# OR head loss and decoding


def _or_delta_matrix(num_tasks: int) -> np.ndarray:
    """Selection matrix turning (o0,o1) column pairs into o1 - o0 per task."""
    sel = np.zeros((2 * num_tasks, num_tasks))
    for k in range(num_tasks):
        sel[2 * k, k] = -1.0
        sel[2 * k + 1, k] = 1.0
    return sel


def or_task_deltas(outputs) -> np.ndarray:
    values = outputs.values if isinstance(outputs, Tensor) else np.asarray(outputs)
    if values.ndim != 2 or values.shape[1] % 2 != 0 or values.shape[1] == 0:
        raise ShapeError(f"OR outputs must be (B, 2(K-1)), got {values.shape}")
    return values[:, 1::2] - values[:, 0::2]


def or_loss(outputs: Tensor, ranks) -> Tensor:
    """Summed-over-tasks binary cross-entropy, averaged over the batch only.

    P(label 1) = exp(o1) / (exp(o1) + exp(o0)) = sigmoid(o1 - o0); both
    log P and log(1-P) go through logsigmoid to stay finite for any logits.
    """
    batch, width = outputs.shape
    if batch == 0:
        raise DataError("or_loss needs a non-empty batch")
    if len(ranks) != batch:
        raise DataError(f"{len(ranks)} labels for batch of {batch}")
    num_tasks = width // 2
    targets = _target_matrix(ranks, num_tasks + 1)
    delta = ad.matmul(outputs, ad.constant(_or_delta_matrix(num_tasks)))
    log_p = ad.logsigmoid(delta)
    log_not_p = ad.logsigmoid(ad.neg(delta))
    per_cell = ad.add(ad.mul(ad.constant(targets), log_p),
                      ad.mul(ad.constant(1.0 - targets), log_not_p))
    return ad.mul(ad.sum_all(per_cell), -1.0 / batch)


def or_probabilities(output_values: np.ndarray) -> np.ndarray:
    return _sigmoid(or_task_deltas(output_values))


def or_decode(output_values: np.ndarray) -> np.ndarray:
    """Predicted rank = number of tasks with P(label 1) > 0.5; ties at
    exactly 0.5 do not count."""
    return (or_task_deltas(output_values) > 0).sum(axis=1)


def or_decode_probs(probs) -> int:
    """Rank from one task-probability vector (used by grid checks)."""
    return int(sum(1 for p in probs if p > 0.5))


# ---------------------------------------------------------------------------
# CE head loss and decoding


def ce_loss(logits: Tensor, ranks) -> Tensor:
    batch, num_ranks = logits.shape
    if batch == 0:
        raise DataError("ce_loss needs a non-empty batch")
    if len(ranks) != batch:
        raise DataError(f"{len(ranks)} labels for batch of {batch}")
    one_hot = np.zeros((batch, num_ranks))
    for i, r in enumerate(ranks):
        if not 0 <= r < num_ranks:
            raise DataError(f"rank {r} out of range for K={num_ranks}")
        one_hot[i, r] = 1.0
    picked = ad.mul(ad.log_softmax_rows(logits), ad.constant(one_hot))
    return ad.mul(ad.sum_all(picked), -1.0 / batch)


def ce_decode(logit_values: np.ndarray) -> np.ndarray:
    """Argmax rank; exact ties resolve to the lowest index."""
    return np.argmax(np.asarray(logit_values), axis=1)


# ---------------------------------------------------------------------------
# CORAL head loss and decoding


def coral_loss(outputs: Tensor, ranks) -> Tensor:
    """Binary cross-entropy against expanded targets, averaged over samples
    and tasks."""
    batch, num_tasks = outputs.shape
    if batch == 0:
        raise DataError("coral_loss needs a non-empty batch")
    if len(ranks) != batch:
        raise DataError(f"{len(ranks)} labels for batch of {batch}")
    targets = _target_matrix(ranks, num_tasks + 1)
    log_p = ad.logsigmoid(outputs)
    log_not_p = ad.logsigmoid(ad.neg(outputs))
    per_cell = ad.add(ad.mul(ad.constant(targets), log_p),
                      ad.mul(ad.constant(1.0 - targets), log_not_p))
    return ad.mul(ad.sum_all(per_cell), -1.0 / (batch * num_tasks))


def coral_decode(output_values: np.ndarray) -> np.ndarray:
    values = np.asarray(output_values)
    if values.ndim != 2:
        raise ShapeError(f"CORAL outputs must be (B, K-1), got {values.shape}")
    return (values > 0).sum(axis=1)


def coral_decode_probs(probs) -> int:
    return int(sum(1 for p in probs if p > 0.5))


def coral_check_monotone(probs: np.ndarray, tol: float = 1e-9) -> bool:
    """True when every row's task probabilities are non-increasing (rank
    consistency); the evaluation harness asserts this for CORAL heads."""
    probs = np.asarray(probs)
    if probs.shape[1] <= 1:
        return True
    return bool(np.all(probs[:, 1:] <= probs[:, :-1] + tol))
