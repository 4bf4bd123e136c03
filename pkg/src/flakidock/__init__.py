"""FlakiDock: detect and repair flaky container-image build definitions.

A flaky build definition succeeds or fails over time with no change to the
file or project source. This package builds definitions repeatedly to
detect that behavior, reduces failing logs to error-focused excerpts,
retrieves similar repaired examples by embedding similarity, and drives an
iterative generate-validate-feedback repair loop against a pluggable
text-generation provider.
"""

from .build_engine import BuildEngine, BuildRecord, HygienePolicy
from .demo_store import DemonstrationRecord, FlakinessCategory, load_store, save_store
from .dockerfile_model import DockerfileDoc, diff_docs, parse_dockerfile, serialize
from .log_preprocess import PreprocessedLog, RuleSet, preprocess_log, segment_stages
from .repair_pipeline import (
    ProviderSet,
    RepairSession,
    ValidationPolicy,
    detect_flakiness,
    repair_flaky_dockerfile,
)
from .similarity import EmbeddingVector, RepairQuery, cluster_add, cosine, embed, retrieve_top_k

__version__ = "0.1.0"

__all__ = [
    "BuildEngine",
    "BuildRecord",
    "DemonstrationRecord",
    "DockerfileDoc",
    "EmbeddingVector",
    "FlakinessCategory",
    "HygienePolicy",
    "PreprocessedLog",
    "ProviderSet",
    "RepairQuery",
    "RepairSession",
    "RuleSet",
    "ValidationPolicy",
    "cluster_add",
    "cosine",
    "detect_flakiness",
    "diff_docs",
    "embed",
    "load_store",
    "parse_dockerfile",
    "preprocess_log",
    "repair_flaky_dockerfile",
    "retrieve_top_k",
    "save_store",
    "segment_stages",
    "serialize",
    "__version__",
]
