"""SVD-guided distillation of cross-modal re-identification embeddings."""

from svdkd.data_model import (
    Batch,
    EmbeddingSet,
    Modality,
    SampleMeta,
    load_embedding_set,
    modality_pairs,
    sample_batch,
    save_embedding_set,
)
from svdkd.errors import (
    ArgumentError,
    DataError,
    DegenerateSpectrumError,
    EvalError,
    FormatError,
    IoError,
    MiningError,
    NumericalError,
    SamplingError,
    SvdkdError,
)

__version__ = "0.1.0"
