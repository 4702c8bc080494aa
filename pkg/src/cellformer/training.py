"""Training and evaluation harness.

One run: split the data 3:1:1, impute val/test with training-split
statistics, pre-embed every split (store misses fail before epoch 1),
then per seed train with Adam and early stopping on validation RMSE,
restore the best-validation parameters and score the test split. Seed
metrics are averaged with an order-invariant exact sum.

Everything is deterministic given (config, seed): parameter init, epoch
shuffles and corruption draws all derive from named seeds.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import (
    Dataset,
    compute_imputation_stats,
    corrupt,
    impute,
    load_dataset,
    split,
)
from .embedding import (
    EmbeddedSample,
    HashEmbedder,
    StoreProvider,
    embed_sample,
    open_store,
)
from .errors import CheckFailure, DataError
from .heads import coral_check_monotone, make_head
from .metrics import mae, rmse
from .model import (
    CellTransformer,
    EncoderConfig,
    MLPBackbone,
    load_checkpoint,
    restore_parameters,
    save_checkpoint,
)
from .prompts import render_sample

DEFAULT_RATES = (0.0, 0.05, 0.1, 0.15, 0.2)
DEFAULT_LR = {"ce": 1e-5, "or": 1e-5, "coral": 5e-5}

_HEAD_SEED_OFFSET = 1000003


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Bias-corrected Adam over trainable parameters."""

    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise DataError(f"learning rate must be positive, got {lr}")
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.tensor.values) for p in self.params]
        self._v = [np.zeros_like(p.tensor.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.tensor.grad
            if g.shape != p.tensor.values.shape:
                raise DataError(
                    f"gradient shape {g.shape} != parameter shape "
                    f"{p.tensor.values.shape} for {p.name!r}"
                )
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * g * g
            m_hat = self._m[i] / (1 - self.beta1 ** self.t)
            v_hat = self._v[i] / (1 - self.beta2 ** self.t)
            p.tensor.values = p.tensor.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class TrainConfig:
    head: str = "or"
    data: str | None = None
    schema: str | None = None
    provider: dict = field(default_factory=lambda: {"kind": "hash", "dim": 64, "seed": 0})
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        input_dim=64, model_dim=32, layers=2, heads=2))
    lr: float | None = None  # None -> per-head default
    batch_size: int = 60
    max_epochs: int = 100
    patience: int = 10
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    split_seed: int = 0
    head_hidden: int | None = None
    mlp_hidden: int = 64
    out_dir: str | None = None

    def __post_init__(self):
        if self.head not in DEFAULT_LR:
            raise DataError(f"unknown head {self.head!r} (expected ce|or|coral)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise DataError("batch_size must be >= 1, epochs/patience >= 0")
        if self.lr is not None and self.lr <= 0:
            raise DataError(f"learning rate must be positive, got {self.lr}")
        if len(self.seeds) < 1:
            raise DataError("need at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def effective_lr(self) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[self.head]

    def to_dict(self) -> dict:
        return {
            "head": self.head,
            "data": self.data,
            "schema": self.schema,
            "provider": dict(self.provider),
            "encoder": self.encoder.to_dict(),
            "lr": self.effective_lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seeds": list(self.seeds),
            "split_seed": self.split_seed,
            "head_hidden": self.head_hidden,
            "mlp_hidden": self.mlp_hidden,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc.pop("out_dir", None)
        if "encoder" in doc:
            doc["encoder"] = EncoderConfig.from_dict(doc["encoder"])
        if "seeds" in doc:
            doc["seeds"] = tuple(doc["seeds"])
        return cls(**doc)


def make_provider(spec: dict):
    kind = spec.get("kind")
    if kind == "hash":
        return HashEmbedder(dim=int(spec.get("dim", 64)), seed=int(spec.get("seed", 0)))
    if kind == "store":
        return StoreProvider(open_store(spec["path"]))
    raise DataError(f"unknown provider kind {kind!r} (expected hash|store)")


# ---------------------------------------------------------------------------
# Data preparation


@dataclass
class PreparedSplits:
    schema: object
    num_ranks: int
    datasets: dict[str, Dataset]  # imputed train/val/test
    ranks: dict[str, list[int]]


@dataclass
class PreparedEmbeddings:
    provider: object
    samples: dict[str, list[EmbeddedSample]]


def prepare_splits(config: TrainConfig, dataset: Dataset | None = None) -> PreparedSplits:
    if dataset is None:
        if not config.data or not config.schema:
            raise DataError("config needs data and schema paths (or pass a dataset)")
        dataset = load_dataset(config.data, config.schema)
    train_ds, val_ds, test_ds = split(dataset, config.split_seed)
    stats = compute_imputation_stats(train_ds)
    datasets = {
        "train": impute(train_ds, stats),
        "val": impute(val_ds, stats),
        "test": impute(test_ds, stats),
    }
    return PreparedSplits(
        schema=dataset.schema,
        num_ranks=dataset.schema.num_ranks,
        datasets=datasets,
        ranks={name: ds.ranks() for name, ds in datasets.items()},
    )


def embed_dataset(provider, dataset: Dataset) -> list[EmbeddedSample]:
    samples = []
    for i, row in enumerate(dataset.rows):
        prompted = render_sample(dataset.schema, row.cells)
        samples.append(embed_sample(provider, prompted, row_index=i))
    return samples


def embed_splits(config: TrainConfig, prep: PreparedSplits) -> PreparedEmbeddings:
    provider = make_provider(config.provider)
    if provider.dim != config.encoder.input_dim:
        raise DataError(
            f"provider dim {provider.dim} != encoder input_dim "
            f"{config.encoder.input_dim}"
        )
    return PreparedEmbeddings(
        provider=provider,
        samples={name: embed_dataset(provider, ds) for name, ds in prep.datasets.items()},
    )


# ---------------------------------------------------------------------------
# Numeric featurization for the MLP baseline


@dataclass
class Featurizer:
    """Continuous -> standardized, binary -> {0,1}, categorical -> one-hot
    over training categories (unseen categories map to all zeros);
    free-text columns are dropped."""

    columns: list[tuple[int, str, dict]]
    width: int

    def transform(self, dataset: Dataset) -> np.ndarray:
        out = np.zeros((len(dataset), self.width))
        for r, row in enumerate(dataset.rows):
            col = 0
            for j, kind, info in self.columns:
                cell = row.cells[j]
                if kind == "continuous":
                    out[r, col] = (cell.value - info["mean"]) / info["std"]
                    col += 1
                elif kind == "binary":
                    out[r, col] = 1.0 if cell.value else 0.0
                    col += 1
                else:  # categorical one-hot
                    offset = info["index"].get(cell.value)
                    if offset is not None:
                        out[r, col + offset] = 1.0
                    col += len(info["index"])
        return out


def fit_featurizer(train: Dataset) -> Featurizer:
    columns = []
    width = 0
    for j, spec in enumerate(train.schema.features):
        if spec.modality == "free_text":
            continue
        if spec.modality == "continuous":
            values = np.array([row.cells[j].value for row in train.rows], dtype=float)
            std = float(values.std())
            columns.append((j, "continuous", {"mean": float(values.mean()),
                                              "std": std if std > 0 else 1.0}))
            width += 1
        elif spec.modality == "binary":
            columns.append((j, "binary", {}))
            width += 1
        else:
            cats = sorted({row.cells[j].value for row in train.rows})
            columns.append((j, "categorical", {"index": {c: i for i, c in enumerate(cats)}}))
            width += len(cats)
    if width == 0:
        raise DataError("no numeric features for the MLP baseline")
    return Featurizer(columns=columns, width=width)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    rmse: float
    mae: float
    pred: list[int]
    truth: list[int]
    probabilities: np.ndarray


def predict(encode_fn, head, n: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Forward in evaluation batches; returns (decoded ranks, probabilities)."""
    preds = []
    probs = []
    for start in range(0, n, batch_size):
        idx = list(range(start, min(start + batch_size, n)))
        values = head.forward(encode_fn(idx)).values
        preds.append(head.decode(values))
        probs.append(head.probabilities(values))
    pred = np.concatenate(preds)
    prob = np.concatenate(probs, axis=0)
    if head.kind == "coral" and not coral_check_monotone(prob):
        raise CheckFailure("CORAL task probabilities are not rank-consistent")
    return pred, prob


def evaluate(encode_fn, head, ranks, batch_size: int = 60) -> EvalResult:
    if not ranks:
        raise DataError("cannot evaluate an empty split")
    pred, prob = predict(encode_fn, head, len(ranks), batch_size)
    pred_list = [int(p) for p in pred]
    return EvalResult(
        rmse=rmse(pred_list, ranks),
        mae=mae(pred_list, ranks),
        pred=pred_list,
        truth=list(ranks),
        probabilities=prob,
    )


# ---------------------------------------------------------------------------
# Single-seed fit


@dataclass
class RunState:
    """One seed's trainable pieces: the head, all parameters, and an
    encode(indices) -> Tensor closure per split."""

    head: object
    params: list
    encode: dict
    model: object | None = None


@dataclass
class FitResult:
    seed: int
    best_epoch: int
    history: list[dict]
    test: EvalResult
    params: dict


def _snapshot(params) -> dict[str, np.ndarray]:
    return {p.name: p.tensor.values.copy() for p in params}


def _restore(params, snapshot: dict[str, np.ndarray]) -> None:
    for p in params:
        p.tensor.values = snapshot[p.name].copy()
        p.tensor.zero_grad()


def fit(config: TrainConfig, seed: int, state: RunState, ranks) -> FitResult:
    """Train one seed with Adam + early stopping on validation RMSE."""
    adam = Adam(state.params, lr=config.effective_lr)
    shuffle_rng = np.random.default_rng(seed)
    n_train = len(ranks["train"])
    best_rmse = math.inf
    best_epoch = -1
    best_params = _snapshot(state.params)
    bad_epochs = 0
    history = []
    for epoch in range(config.max_epochs):
        perm = shuffle_rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = [int(i) for i in perm[start:start + config.batch_size]]
            adam.zero_grad()
            outputs = state.head.forward(state.encode["train"](idx))
            loss = state.head.loss(outputs, [ranks["train"][i] for i in idx])
            loss.backward()
            adam.step()
            total += float(loss.values) * len(idx)
        val = evaluate(state.encode["val"], state.head, ranks["val"], config.batch_size)
        history.append({
            "epoch": epoch,
            "train_loss": total / n_train,
            "val_rmse": val.rmse,
            "val_mae": val.mae,
        })
        if val.rmse < best_rmse:
            best_rmse = val.rmse
            best_epoch = epoch
            best_params = _snapshot(state.params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break
    _restore(state.params, best_params)
    test = evaluate(state.encode["test"], state.head, ranks["test"], config.batch_size)
    return FitResult(seed=seed, best_epoch=best_epoch, history=history,
                     test=test, params={p.name: p for p in state.params})


# ---------------------------------------------------------------------------
# Multi-seed runs


@dataclass
class SeedResult:
    seed: int
    rmse: float
    mae: float
    best_epoch: int
    history: list[dict]
    test: EvalResult


@dataclass
class RunResult:
    head: str
    seed_results: list[SeedResult]
    models: dict[int, dict]  # seed -> named Parameter map (encoder + head)
    num_ranks: int

    @property
    def mean_rmse(self) -> float:
        return math.fsum(r.rmse for r in self.seed_results) / len(self.seed_results)

    @property
    def mean_mae(self) -> float:
        return math.fsum(r.mae for r in self.seed_results) / len(self.seed_results)

    def metrics_doc(self) -> dict:
        return {
            "head": self.head,
            "per_seed": [
                {"seed": r.seed, "rmse": r.rmse, "mae": r.mae, "best_epoch": r.best_epoch}
                for r in self.seed_results
            ],
            "mean": {"rmse": self.mean_rmse, "mae": self.mean_mae},
        }


def _transformer_state(config: TrainConfig, seed: int, num_ranks: int,
                       samples: dict[str, list[EmbeddedSample]]) -> RunState:
    model = CellTransformer(config.encoder, seed=seed)
    head = make_head(config.head, model.output_dim, num_ranks,
                     hidden_dim=config.head_hidden, seed=seed + _HEAD_SEED_OFFSET)
    encode = {
        name: (lambda idx, _s=batch: model.encode_batch([_s[i] for i in idx]))
        for name, batch in samples.items()
    }
    return RunState(head=head, params=model.parameters() + head.parameters(),
                    encode=encode, model=model)


def train(config: TrainConfig, dataset: Dataset | None = None) -> RunResult:
    """Full multi-seed transformer run."""
    prep = prepare_splits(config, dataset)
    emb = embed_splits(config, prep)
    seed_results = []
    models = {}
    for seed in config.seeds:
        state = _transformer_state(config, seed, prep.num_ranks, emb.samples)
        result = fit(config, seed, state, prep.ranks)
        seed_results.append(SeedResult(
            seed=seed, rmse=result.test.rmse, mae=result.test.mae,
            best_epoch=result.best_epoch, history=result.history, test=result.test,
        ))
        models[seed] = result.params
    return RunResult(head=config.head, seed_results=seed_results,
                     models=models, num_ranks=prep.num_ranks)


def mlp_baseline(config: TrainConfig, dataset: Dataset | None = None) -> RunResult:
    """Numeric-only MLP trained with the same loop and heads; free-text
    columns are dropped by the featurization."""
    prep = prepare_splits(config, dataset)
    featurizer = fit_featurizer(prep.datasets["train"])
    features = {name: featurizer.transform(ds) for name, ds in prep.datasets.items()}
    seed_results = []
    models = {}
    for seed in config.seeds:
        backbone = MLPBackbone(featurizer.width, hidden_dim=config.mlp_hidden, seed=seed)
        head = make_head(config.head, backbone.output_dim, prep.num_ranks,
                         hidden_dim=config.head_hidden, seed=seed + _HEAD_SEED_OFFSET)
        encode = {
            name: (lambda idx, _x=mat: backbone.encode_batch(_x[idx]))
            for name, mat in features.items()
        }
        state = RunState(head=head, params=backbone.parameters() + head.parameters(),
                         encode=encode)
        result = fit(config, seed, state, prep.ranks)
        seed_results.append(SeedResult(
            seed=seed, rmse=result.test.rmse, mae=result.test.mae,
            best_epoch=result.best_epoch, history=result.history, test=result.test,
        ))
        models[seed] = result.params
    return RunResult(head=config.head, seed_results=seed_results,
                     models=models, num_ranks=prep.num_ranks)


# ---------------------------------------------------------------------------
# Corruption robustness benchmark


@dataclass
class CurvePoint:
    rate: float
    rmse: float
    mae: float


def corruption_benchmark(config: TrainConfig, rates=DEFAULT_RATES,
                         dataset: Dataset | None = None) -> list[CurvePoint]:
    """Train on clean data, then evaluate the test split corrupted at each
    rate (rate 0 reuses the clean evaluation exactly). Metrics are averaged
    across config.seeds; rows come back sorted by rate."""
    rates = sorted(float(r) for r in rates)
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise DataError(f"corruption rate must be in [0, 1], got {r}")
    prep = prepare_splits(config, dataset)
    emb = embed_splits(config, prep)
    per_rate: dict[float, list[tuple[float, float]]] = {r: [] for r in rates}
    for seed in config.seeds:
        state = _transformer_state(config, seed, prep.num_ranks, emb.samples)
        fit(config, seed, state, prep.ranks)
        for rate_idx, rate in enumerate(rates):
            if rate == 0.0:
                samples = emb.samples["test"]
            else:
                corrupted = corrupt(prep.datasets["test"], rate,
                                    seed=(seed + 1) * 99991 + rate_idx)
                samples = embed_dataset(emb.provider, corrupted.dataset)
            encode = (lambda idx, _s=samples, _m=state.model:
                      _m.encode_batch([_s[i] for i in idx]))
            result = evaluate(encode, state.head, prep.ranks["test"], config.batch_size)
            per_rate[rate].append((result.rmse, result.mae))
    return [
        CurvePoint(
            rate=rate,
            rmse=math.fsum(v[0] for v in per_rate[rate]) / len(per_rate[rate]),
            mae=math.fsum(v[1] for v in per_rate[rate]) / len(per_rate[rate]),
        )
        for rate in rates
    ]


# ---------------------------------------------------------------------------
# Checkpoint round trip (encoder and head serialize together)


def save_run_checkpoint(path, config: TrainConfig, num_ranks: int, params: dict) -> None:
    doc = {"train_config": config.to_dict(), "num_ranks": num_ranks}
    save_checkpoint(path, doc, list(params.values()))


def load_run_checkpoint(path):
    """Rebuild (config, num_ranks, model, head) from a training checkpoint."""
    doc, values = load_checkpoint(path)
    config = TrainConfig.from_dict(doc["train_config"])
    num_ranks = int(doc["num_ranks"])
    model = CellTransformer(config.encoder, seed=0)
    head = make_head(config.head, model.output_dim, num_ranks,
                     hidden_dim=config.head_hidden, seed=0)
    restore_parameters(
        model.params, {k: v for k, v in values.items() if not k.startswith("head.")})
    restore_parameters(
        head.params, {k: v for k, v in values.items() if k.startswith("head.")})
    return config, num_ranks, model, head


# ---------------------------------------------------------------------------
# Artifact writers (fixed column orders; metrics JSON is byte-stable)


def metrics_json(result: RunResult) -> str:
    return json.dumps(result.metrics_doc(), sort_keys=True, indent=2) + "\n"


def write_metrics(result: RunResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(metrics_json(result))


def write_history(result: RunResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("seed,epoch,train_loss,val_rmse,val_mae\n")
        for sr in result.seed_results:
            for row in sr.history:
                fh.write(f"{sr.seed},{row['epoch']},{row['train_loss']!r},"
                         f"{row['val_rmse']!r},{row['val_mae']!r}\n")


def prediction_columns(head_kind: str, num_ranks: int) -> list[str]:
    if head_kind == "ce":
        return [f"prob_rank_{k}" for k in range(num_ranks)]
    return [f"prob_gt_{k}" for k in range(num_ranks - 1)]


def write_predictions(result: EvalResult, head_kind: str, num_ranks: int, path) -> None:
    """Per-sample CSV: id, true rank, predicted rank, per-task probabilities."""
    cols = prediction_columns(head_kind, num_ranks)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,true_rank,pred_rank," + ",".join(cols) + "\n")
        for i, (t, p) in enumerate(zip(result.truth, result.pred)):
            probs = ",".join(repr(float(x)) for x in result.probabilities[i])
            fh.write(f"{i},{t},{p},{probs}\n")


def write_curve(curve: list[CurvePoint], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rate,rmse,mae\n")
        for point in curve:
            fh.write(f"{point.rate!r},{point.rmse!r},{point.mae!r}\n")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(config: TrainConfig, path, tool_version: str, timestamp: str) -> None:
    """Run manifest: resolved config, input digests, version, seeds.
    Written before training starts."""
    inputs = {}
    for p in (config.data, config.schema, config.provider.get("path")):
        if p and os.path.exists(p):
            inputs[str(p)] = file_digest(p)
    doc = {
        "tool": "cellformer",
        "version": tool_version,
        "created": timestamp,
        "config": config.to_dict(),
        "inputs": inputs,
        "seeds": list(config.seeds),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
