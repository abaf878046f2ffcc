"""Domain transfer networks: learn G = g o f mapping a source image domain
into a target domain while keeping a fixed representation f constant."""

from .data import (
    ClassOmissionFilter,
    DatasetSplit,
    Domain,
    ImageSample,
    apply_omission,
    fetch_mnist,
    fetch_svhn,
    make_batches,
    replicate_channels,
)
from .estimators import BaselineTransfer, DigitClassifier, DomainTransferNetwork
from .evaluation import MetricsReport, RetrievalResult
from .losses import LossReport, LossWeights
from .training import Ablation, Direction, TrainingConfig, TransferModel

__version__ = "0.1.0"

__all__ = [
    "Ablation",
    "BaselineTransfer",
    "ClassOmissionFilter",
    "DatasetSplit",
    "DigitClassifier",
    "Direction",
    "Domain",
    "DomainTransferNetwork",
    "ImageSample",
    "LossReport",
    "LossWeights",
    "MetricsReport",
    "RetrievalResult",
    "TrainingConfig",
    "TransferModel",
    "apply_omission",
    "fetch_mnist",
    "fetch_svhn",
    "make_batches",
    "replicate_channels",
]
