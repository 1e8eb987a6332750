"""Federated expectation-maximisation over a grid of shared Gaussian input
models and shared logistic-regression learners, with per-client mixture weights."""

from ._kernels import BACKEND
from .datagen import (
    ClientData,
    PlantedTruth,
    ShiftSpec,
    SyntheticSpec,
    apply_shift,
    generate_figure1,
    generate_synthetic,
    read_dataset,
    write_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    DataFormatError,
    DegenerateRowError,
    FactorizationError,
    FedGMMError,
    NumericalError,
)
from .evaluation import accuracy, auroc, average_precision, max_f1, score_ood
from .federation import (
    ClientState,
    FederationConfig,
    GlobalModel,
    adapt_unseen_client,
    aggregate,
    centralized_em,
    client_update,
    init_model,
    make_clients,
    run_round,
    train,
)
from .model import (
    CONDITIONAL_ONLY,
    FULL,
    UNSUPERVISED,
    GaussianComponent,
    LabeledDataset,
    LearnerParams,
    MixtureWeights,
    e_step,
    predict_label,
)

__version__ = "0.1.0"
