"""Language-guided disentangling querying transformer for activity-based
person identification, with a synthetic factorized world for verification.
"""

from .config import OptimizerConfig, RunConfig
from .estimator import DisenQEmbedder
from .losses import LossWeights
from .manifest import ingest_manifest, write_dataset
from .model import DisenQModel
from .qformer import DisenQ, DisenQConfig, DisentangledFeatures
from .retrieval import (AdaptiveWeigher, RetrievalReport, compute_cmc_map,
                        evaluate_protocol, pair_similarity)
from .train import Trainer, TrainingDiverged
from .world import (BiometricsStore, Dataset, Protocol, TextTriplet,
                    VideoSample, WorldSpec, generate_dataset,
                    refine_biometrics_embedding, split_protocol)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveWeigher", "BiometricsStore", "Dataset", "DisenQ", "DisenQConfig",
    "DisenQEmbedder", "DisenQModel", "DisentangledFeatures", "LossWeights",
    "OptimizerConfig", "Protocol", "RetrievalReport", "RunConfig",
    "TextTriplet", "Trainer", "TrainingDiverged", "VideoSample", "WorldSpec",
    "compute_cmc_map", "evaluate_protocol", "generate_dataset",
    "ingest_manifest", "pair_similarity", "refine_biometrics_embedding",
    "split_protocol", "write_dataset",
]
