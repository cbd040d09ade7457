"""Per-prompt adapter routing via nearest centroids.

Each learning cycle yields an adapter plus a router trained on the
questions the adapter learned (hallucinated side) versus the questions the
base model already handled. At inference time the prompt goes to the
adapter whose learned-side centroid is strictly closer than its known-side
centroid; ties and empty registries fall back to the base model, which is
always the safe choice. The decision is emitted as metadata; adapter
activation itself belongs to the serving stack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import QuestionRecord
from .gateway import EmbeddingBackend, EmbeddingVector, embed

BASE_MODEL = "base"


@dataclass(frozen=True)
class RouterModel:
    adapter_id: str
    centroid_h: EmbeddingVector
    centroid_nh: EmbeddingVector
    margin: float = 0.0

    def __post_init__(self) -> None:
        if self.centroid_h.dimension != self.centroid_nh.dimension:
            raise ValueError("router centroids must share a dimension")


def _mean_vector(vectors: Sequence[EmbeddingVector]) -> EmbeddingVector:
    matrix = np.asarray([v.values for v in vectors])
    mean = matrix.mean(axis=0)
    return EmbeddingVector(values=tuple(float(v) for v in mean), dimension=matrix.shape[1])


def train_router(
    q_h_sample: Sequence[QuestionRecord],
    q_nh_sample: Sequence[QuestionRecord],
    adapter_id: str,
    embedder: EmbeddingBackend,
    *,
    margin: float = 0.0,
) -> RouterModel:
    """Centroids are the arithmetic means of each class's question embeddings."""
    if not q_h_sample or not q_nh_sample:
        raise ValueError("both classes need at least one sample")
    h_vectors = embed([q.text for q in q_h_sample], embedder)
    nh_vectors = embed([q.text for q in q_nh_sample], embedder)
    return RouterModel(
        adapter_id=adapter_id,
        centroid_h=_mean_vector(h_vectors),
        centroid_nh=_mean_vector(nh_vectors),
        margin=margin,
    )


def route(
    prompt: str,
    routers: Sequence[RouterModel],
    embedder: EmbeddingBackend,
) -> str:
    """Adapter id whose learned centroid is strictly closest, else base.

    A router is a candidate only when d_h + margin < d_nh; among
    candidates the smallest d_h wins. No routers, or no candidate, or an
    exact tie all mean the base model answers.
    """
    if not routers:
        return BASE_MODEL
    vector = embed([prompt], embedder)[0].as_array()
    best_adapter = BASE_MODEL
    best_distance = np.inf
    for router in routers:
        d_h = float(np.linalg.norm(vector - router.centroid_h.as_array()))
        d_nh = float(np.linalg.norm(vector - router.centroid_nh.as_array()))
        if d_h + router.margin < d_nh and d_h < best_distance:
            best_distance = d_h
            best_adapter = router.adapter_id
    return best_adapter


# --- Registry file -------------------------------------------------------------

def save_registry(
    routers: Sequence[RouterModel], path: str | Path, *, trained_on_run_id: str = ""
) -> None:
    payload = [
        {
            "adapter_id": r.adapter_id,
            "centroid_h": list(r.centroid_h.values),
            "centroid_nh": list(r.centroid_nh.values),
            "margin": r.margin,
            "trained_on_run_id": trained_on_run_id,
        }
        for r in routers
    ]
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, ensure_ascii=False, indent=2)
        handle.write("\n")


def load_registry(path: str | Path) -> list[RouterModel]:
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    routers = []
    for row in payload:
        dimension = len(row["centroid_h"])
        routers.append(
            RouterModel(
                adapter_id=row["adapter_id"],
                centroid_h=EmbeddingVector(values=tuple(row["centroid_h"]), dimension=dimension),
                centroid_nh=EmbeddingVector(values=tuple(row["centroid_nh"]), dimension=dimension),
                margin=row.get("margin", 0.0),
            )
        )
    return routers
