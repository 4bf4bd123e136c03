"""Embeddings, cosine similarity, incremental clustering, and top-k retrieval.

Clustering is incremental and per project: each new failing build output
joins the existing cluster with the highest mean member similarity when
that mean clears the threshold, otherwise it starts a new cluster. The
retrieval index is an exact full scan; at the store sizes this tool works
with (<= 10k records) approximate indexes buy nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, TokenLimit, ZeroVector
from .providers import EmbeddingProvider, estimate_tokens, truncate_to_tokens

STATIC_DELIMITER = "=== DOCKERFILE ==="
DYNAMIC_DELIMITER = "=== BUILD OUTPUT ==="


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dim: int
    provider_id: str

    def __post_init__(self):
        if len(self.values) != self.dim:
            raise DimensionMismatch(
                f"vector has {len(self.values)} values, declared dim {self.dim}"
            )


def embed(text: str, provider: EmbeddingProvider, truncate: bool = True) -> EmbeddingVector:
    """Embed text through a provider, enforcing its token limit.

    Raises TokenLimit when the text is over the limit and truncation is
    disabled, and ZeroVector if the provider ever returns all zeros.
    """
    if not text:
        raise ValueError("cannot embed empty text")
    if provider.token_limit is not None and estimate_tokens(text) > provider.token_limit:
        if not truncate:
            raise TokenLimit(
                f"text is ~{estimate_tokens(text)} tokens, limit {provider.token_limit}"
            )
        text = truncate_to_tokens(text, provider.token_limit)
    values = provider.embed_values(text)
    if not any(values):
        raise ZeroVector(f"provider {provider.provider_id} returned the zero vector")
    return EmbeddingVector(tuple(values), provider.dim, provider.provider_id)


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise DimensionMismatch(f"dims differ: {a.dim} vs {b.dim}")
    norm_a = math.sqrt(sum(x * x for x in a.values))
    norm_b = math.sqrt(sum(y * y for y in b.values))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine similarity is undefined for the zero vector")
    dot = sum(x * y for x, y in zip(a.values, b.values))
    return dot / (norm_a * norm_b)


def combine_static_dynamic(static_text: str, dynamic_text: str) -> str:
    """Join a build definition and its build-output excerpt with labels."""
    return f"{STATIC_DELIMITER}\n{static_text}\n{DYNAMIC_DELIMITER}\n{dynamic_text}"


@dataclass(frozen=True)
class RepairQuery:
    static_part: str
    dynamic_part: str
    combined_text: str

    @classmethod
    def build(cls, static_part: str, dynamic_part: str) -> "RepairQuery":
        return cls(
            static_part=static_part,
            dynamic_part=dynamic_part,
            combined_text=combine_static_dynamic(static_part, dynamic_part),
        )


@dataclass
class Cluster:
    id: int
    member_ids: list[str]
    member_vectors: list[EmbeddingVector] = field(repr=False, default_factory=list)
    centroid: EmbeddingVector | None = None


def _renormalized_mean(vectors: list[EmbeddingVector]) -> EmbeddingVector:
    matrix = np.asarray([v.values for v in vectors], dtype=np.float64)
    mean = matrix.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm > 0.0:
        mean = mean / norm
    first = vectors[0]
    return EmbeddingVector(tuple(float(x) for x in mean), first.dim, first.provider_id)


def cluster_add(
    state: list[Cluster],
    output_id: str,
    vec: EmbeddingVector,
    threshold: float,
) -> tuple[list[Cluster], int]:
    """Assign one build output to the cluster state; returns (state, cluster id).

    The candidate joins the cluster whose members are on average most similar
    to it, provided that mean similarity reaches the threshold; otherwise a
    new singleton cluster is created. The centroid is only a cached summary;
    assignment always compares against the members themselves.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    best_id = None
    best_mean = -2.0
    for cluster in state:
        mean = sum(cosine(vec, m) for m in cluster.member_vectors) / len(
            cluster.member_vectors
        )
        if mean > best_mean:
            best_mean = mean
            best_id = cluster.id
    if best_id is not None and best_mean >= threshold:
        cluster = next(c for c in state if c.id == best_id)
        cluster.member_ids.append(output_id)
        cluster.member_vectors.append(vec)
        cluster.centroid = _renormalized_mean(cluster.member_vectors)
        return state, best_id
    new_id = max((c.id for c in state), default=-1) + 1
    state.append(Cluster(new_id, [output_id], [vec], vec))
    return state, new_id


def retrieve_top_k(
    query: RepairQuery,
    store,
    k: int,
    provider: EmbeddingProvider,
) -> list[tuple[object, float]]:
    """Exact top-k scan of the demonstration index for a repair query.

    Results come back in strictly non-increasing similarity order with ties
    broken by ascending record id. An empty store yields an empty list.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(store) == 0:
        return []
    query_vec = embed(query.combined_text, provider)
    matrix = store.matrix.astype(np.float64)
    q = np.asarray(query_vec.values, dtype=np.float64)
    if matrix.shape[1] != q.shape[0]:
        raise DimensionMismatch(
            f"store dim {matrix.shape[1]} vs query dim {q.shape[0]}"
        )
    norms = np.linalg.norm(matrix, axis=1)
    qnorm = np.linalg.norm(q)
    sims = (matrix @ q) / (norms * qnorm)
    ranked = sorted(
        zip(store.records, sims.tolist()),
        key=lambda pair: (-pair[1], pair[0].id),
    )
    return [(record, float(sim)) for record, sim in ranked[:k]]
