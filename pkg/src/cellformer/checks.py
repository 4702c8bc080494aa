"""Finite-difference verification suite.

Checks every differentiable operation, and the full model loss under each
classification head, against central finite differences at 64-bit. The CLI
grad-check subcommand runs this and fails on any entry over its threshold;
the test suite asserts the same bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .embedding import EmbeddedSample
from .heads import make_head
from .model import CellTransformer, EncoderConfig

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _weighted_sum(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalarize with a fixed random weighting so gradients stay distinct."""
    return ad.sum_all(ad.mul(t, ad.constant(rng.uniform(-1, 1, size=t.shape))))


def op_checks(seed: int = 7) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-2, 2, size=(4, 5)))
    x_pos = Tensor(rng.uniform(0.5, 2.5, size=(4, 5)))
    # keep relu inputs away from the kink at 0
    x_off = Tensor(np.where(np.abs(x.values) < 0.1, x.values + 0.3, x.values))
    other = ad.constant(rng.uniform(-2, 2, size=(4, 5)))
    mat = ad.constant(rng.uniform(-1, 1, size=(5, 3)))
    bias = Tensor(rng.uniform(-1, 1, size=(5,)))
    gamma = Tensor(rng.uniform(0.5, 1.5, size=(5,)))
    beta = Tensor(rng.uniform(-0.5, 0.5, size=(5,)))
    mask = np.array([True, False, True, True])

    cases = [
        ("add", lambda t: _weighted_sum(ad.add(t, other), np.random.default_rng(1)), x),
        ("add_broadcast", lambda t: _weighted_sum(ad.add(x, t), np.random.default_rng(2)), bias),
        ("mul", lambda t: _weighted_sum(ad.mul(t, other), np.random.default_rng(3)), x),
        ("neg", lambda t: _weighted_sum(ad.neg(t), np.random.default_rng(4)), x),
        ("matmul", lambda t: _weighted_sum(ad.matmul(t, mat), np.random.default_rng(5)), x),
        ("relu", lambda t: _weighted_sum(ad.relu(t), np.random.default_rng(6)), x_off),
        ("exp", lambda t: _weighted_sum(ad.exp(t), np.random.default_rng(7)), x),
        ("log", lambda t: _weighted_sum(ad.log(t), np.random.default_rng(8)), x_pos),
        ("logsigmoid", lambda t: _weighted_sum(ad.logsigmoid(t), np.random.default_rng(9)), x),
        ("transpose", lambda t: _weighted_sum(ad.transpose(t), np.random.default_rng(10)), x),
        ("reshape", lambda t: _weighted_sum(ad.reshape(t, (2, 10)), np.random.default_rng(11)), x),
        ("concat", lambda t: _weighted_sum(ad.concat([t, other], axis=1),
                                           np.random.default_rng(12)), x),
        ("slice", lambda t: _weighted_sum(ad.slice_rows_cols(t, rows=slice(1, 3),
                                                             cols=slice(0, 4)),
                                          np.random.default_rng(13)), x),
        ("sum", lambda t: ad.sum_all(t), x),
        ("mean", lambda t: ad.mean_all(t), x),
        ("softmax_rows", lambda t: _weighted_sum(ad.softmax_rows(t),
                                                 np.random.default_rng(14)), x),
        ("log_softmax_rows", lambda t: _weighted_sum(ad.log_softmax_rows(t),
                                                     np.random.default_rng(15)), x),
        ("layernorm_rows", lambda t: _weighted_sum(
            ad.layernorm_rows(t, gamma, beta), np.random.default_rng(16)), x),
        ("layernorm_gamma", lambda t: _weighted_sum(
            ad.layernorm_rows(x, t, beta), np.random.default_rng(17)), gamma),
        ("layernorm_beta", lambda t: _weighted_sum(
            ad.layernorm_rows(x, gamma, t), np.random.default_rng(18)), beta),
        ("masked_mean_rows", lambda t: _weighted_sum(
            ad.masked_mean_rows(t, mask), np.random.default_rng(19)), x),
    ]
    return [
        CheckResult(name=name, max_rel_err=grad_check(fn, tensor), tolerance=OP_TOLERANCE)
        for name, fn, tensor in cases
    ]


def _toy_batch(rng: np.random.Generator, m: int, input_dim: int, batch: int):
    samples = []
    ranks = []
    for i in range(batch):
        matrix = rng.uniform(-1, 1, size=(m, input_dim))
        mask = [True] * m
        if i % 2 == 1:
            mask[-1] = False
            matrix[-1] = 0.0
        samples.append(EmbeddedSample(matrix=matrix, mask=tuple(mask)))
        ranks.append(int(rng.integers(5)))
    return samples, ranks


def model_checks(seed: int = 11) -> list[CheckResult]:
    """Full-model loss gradients, every parameter, all three heads."""
    rng = np.random.default_rng(seed)
    config = EncoderConfig(input_dim=16, model_dim=8, layers=2, heads=2, ffn_dim=16)
    samples, ranks = _toy_batch(rng, m=4, input_dim=16, batch=3)
    results = []
    for kind in ("ce", "or", "coral"):
        model = CellTransformer(config, seed=seed)
        head = make_head(kind, model.output_dim, num_ranks=5, seed=seed + 1)
        params = model.parameters() + head.parameters()

        def loss_fn(_=None):
            return head.loss(head.forward(model.encode_batch(samples)), ranks)

        worst = 0.0
        for p in params:
            worst = max(worst, grad_check(loss_fn, p.tensor))
        results.append(CheckResult(
            name=f"model_loss[{kind}]", max_rel_err=worst, tolerance=MODEL_TOLERANCE))
    return results


def gradient_suite() -> list[CheckResult]:
    return op_checks() + model_checks()
