"""cellformer: language-enhanced transformer for ordinal duration
estimation over mixed-modality tabular records."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    CellValue,
    Dataset,
    FeatureSpec,
    LabelSpec,
    MISSING,
    TableSchema,
    bin_label,
    corrupt,
    impute,
    load_dataset,
    load_schema,
    split,
    synthesize,
)
from .embedding import EmbeddedSample, HashEmbedder, StoreProvider, hash_embed  # noqa: F401
from .errors import CellformerError  # noqa: F401
from .heads import expand_targets, make_head  # noqa: F401
from .metrics import mae, rmse  # noqa: F401
from .model import CellTransformer, EncoderConfig  # noqa: F401
from .prompts import parse_template, render, render_sample  # noqa: F401
from .training import TrainConfig, corruption_benchmark, evaluate, mlp_baseline, train  # noqa: F401
