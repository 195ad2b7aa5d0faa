"""Text embeddings, cosine similarity and the two clustering methods."""

import hashlib
import logging
import re
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.cluster import DBSCAN

from .errors import BackendUnavailable, DimensionMismatch, EmbeddingError, EmptyText
from .llm_gateway import HttpClient

logger = logging.getLogger(__name__)

NOISE = -1
LOCAL_DIMENSION = 256
_HASH_KEY = b"coevo-bag-of-words"
_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


class Embedding:
    """A non-zero, finite vector of fixed dimension."""

    __slots__ = ("vector", "norm")

    def __init__(self, values: Sequence[float]):
        vector = np.asarray(values, dtype=float)
        if vector.ndim != 1 or vector.size == 0:
            raise EmbeddingError("embedding must be a non-empty vector")
        if not np.all(np.isfinite(vector)):
            raise EmbeddingError("embedding has non-finite entries")
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise EmbeddingError("zero vector is not a valid embedding")
        self.vector = vector
        self.norm = norm

    @property
    def dimension(self) -> int:
        return self.vector.size

    def to_list(self) -> List[float]:
        return self.vector.tolist()

    def __repr__(self) -> str:
        return f"Embedding(dim={self.dimension}, norm={self.norm:.4g})"


def cosine(a: Embedding, b: Embedding) -> float:
    if a.dimension != b.dimension:
        raise DimensionMismatch(f"cannot compare {a.dimension}-d and {b.dimension}-d embeddings")
    value = float(np.dot(a.vector, b.vector)) / (a.norm * b.norm)
    return min(1.0, max(-1.0, value))


def mean_direction(embeddings: Sequence[Embedding]) -> Embedding:
    """Normalized sum of unit vectors; the first input when they cancel out."""
    total = np.sum([e.vector / e.norm for e in embeddings], axis=0)
    if np.linalg.norm(total) == 0.0:
        return embeddings[0]
    return Embedding(total / np.linalg.norm(total))


class LocalHashEmbedder:
    """Deterministic feature-hashed bag of words, L2-normalized."""

    def __init__(self, dimension: int = LOCAL_DIMENSION):
        self.dimension = dimension

    @staticmethod
    def tokens(text: str) -> List[str]:
        return [token for token in _TOKEN_SPLIT.split(text.lower()) if token]

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=_HASH_KEY).digest()
        return int.from_bytes(digest, "big") % self.dimension

    def embed(self, text: str) -> Embedding:
        tokens = self.tokens(text)
        if not tokens:
            raise EmptyText("nothing to embed")
        counts = np.zeros(self.dimension)
        for token in tokens:
            counts[self.bucket(token)] += 1.0
        return Embedding(counts / np.linalg.norm(counts))


class RemoteEmbedder:
    """OpenAI-compatible /embeddings client."""

    def __init__(self, client: HttpClient, model: str):
        self.client = client
        self.model = model
        self.dimension: Optional[int] = None

    def embed(self, text: str) -> Embedding:
        if not text.strip():
            raise EmptyText("nothing to embed")
        body = self.client.post_json("embeddings", {"model": self.model, "input": text})
        try:
            embedding = Embedding(body["data"][0]["embedding"])
        except (KeyError, IndexError, TypeError, EmbeddingError) as error:
            raise BackendUnavailable(f"unexpected embeddings body: {str(body)[:300]}") from error
        if self.dimension is None:
            self.dimension = embedding.dimension
        elif embedding.dimension != self.dimension:
            raise DimensionMismatch(
                f"embedding dimension changed from {self.dimension} to {embedding.dimension}"
            )
        return embedding


def build_embedder(mode: str = "local", client: Optional[HttpClient] = None, model: str = ""):
    if mode == "local":
        return LocalHashEmbedder()
    if mode == "remote":
        if client is None:
            raise ValueError("remote embeddings need an HTTP client")
        return RemoteEmbedder(client, model)
    raise ValueError(f"unknown embedding mode {mode!r}")


# Clustering

class Clustering(BaseModel):
    """Cluster label per item, in input order. Labels are dense from 0; NOISE is -1."""

    ids: List[str] = Field(default_factory=list)
    labels: List[int] = Field(default_factory=list)
    method: Literal["threshold", "dbscan"] = "threshold"
    params: Dict[str, float] = Field(default_factory=dict)

    @property
    def assignments(self) -> Dict[str, int]:
        return dict(zip(self.ids, self.labels))

    @property
    def n_clusters(self) -> int:
        return len({label for label in self.labels if label != NOISE})

    def members(self, label: int) -> List[str]:
        return [item for item, assigned in zip(self.ids, self.labels) if assigned == label]

    def groups(self) -> List[List[str]]:
        return [self.members(label) for label in range(self.n_clusters)]


def _dense_labels(raw: Sequence[int]) -> List[int]:
    """Relabel clusters by order of first appearance; NOISE stays NOISE."""
    mapping: Dict[int, int] = {}
    labels = []
    for label in raw:
        label = int(label)
        if label == NOISE:
            labels.append(NOISE)
            continue
        if label not in mapping:
            mapping[label] = len(mapping)
        labels.append(mapping[label])
    return labels


def similarity_matrix(embeddings: Sequence[Embedding]) -> np.ndarray:
    n = len(embeddings)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = cosine(embeddings[i], embeddings[j])
    return matrix


def cluster_threshold(items: Sequence[Tuple[str, Embedding]], tau: float = 0.85) -> Clustering:
    """Single linkage: connected components of the cosine >= tau graph."""
    ids = [item_id for item_id, _ in items]
    if not items:
        return Clustering(method="threshold", params={"tau": tau})
    adjacency = similarity_matrix([e for _, e in items]) >= tau
    _, raw = connected_components(csr_matrix(adjacency), directed=False)
    return Clustering(ids=ids, labels=_dense_labels(raw), method="threshold", params={"tau": tau})


def cluster_dbscan(items: Sequence[Tuple[str, Embedding]], eps: float = 0.3, min_pts: int = 2) -> Clustering:
    """DBSCAN on distance 1 - cosine. min_pts counts the point itself."""
    ids = [item_id for item_id, _ in items]
    params = {"eps": eps, "min_pts": float(min_pts)}
    if not items:
        return Clustering(method="dbscan", params=params)
    distances = np.clip(1.0 - similarity_matrix([e for _, e in items]), 0.0, None)
    raw = DBSCAN(eps=eps, min_samples=min_pts, metric="precomputed").fit(distances).labels_
    return Clustering(ids=ids, labels=_dense_labels(raw), method="dbscan", params=params)
