"""Multispectral multi-label classification pipeline.

Band-level PCA (streaming covariance + Jacobi eigensolver), contrastive
and soft contrastive losses with analytic gradients, a from-scratch MLP
classifier with the full training protocol, multi-label metrics, and an
inference/size benchmark harness. Everything is deterministic under a
fixed seed and thread count.
"""

from .data import (
    SampleSet,
    SynthConfig,
    load_sampleset,
    save_sampleset,
    split,
    synthesize,
)
from .losses import (
    contrastive_loss,
    label_similarity,
    soft_loss,
    total_loss,
    total_loss_and_grad,
    total_loss_grad,
)
from .metrics import ConfusionCounts, MetricsReport, confusion, evaluate, report
from .net import (
    Adam,
    EarlyStopping,
    MultiLabelMLP,
    Network,
    ReduceLROnPlateau,
    TrainConfig,
    bce_loss,
    build_classifier,
    count_params,
    load_network,
    model_size_bytes,
    predict_proba,
    save_network,
    train,
)
from .pca import (
    CovAccumulator,
    PcaModel,
    PcaReducer,
    Standardizer,
    eigendecompose_symmetric,
    fit_pca,
    fit_standardizer,
    load_pca,
    project,
    save_pca,
    select_components,
)
from .bench import BenchReport, LatencyStats, SizeComparison, compare_sizes, measure_inference

__version__ = "0.1.0"
