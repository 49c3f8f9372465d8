"""Reference index over training spots and expression prediction by retrieval.

A query patch is embedded into the joint space, the top-k reference spots by
cosine similarity are fetched from a flat exhaustive-scan store, and their
observed expressions are combined with inverse-square Euclidean-distance
weights (computed in the embedding space).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoders as enc
from .contrastive import Checkpoint, _check_unit_rows
from .data import Slide

NEAR_ZERO_DISTANCE = 1e-8  # below this, the nearest neighbor is returned verbatim


class LeakageError(ValueError):
    """Raised when a slide being predicted is present in the reference index."""


@dataclass
class RetrievalIndex:
    embeddings: np.ndarray  # [N_ref, d_embed], unit-norm rows
    expressions: np.ndarray  # [N_ref, hvg_num]
    provenance: list[tuple[str, int]]  # (slide_id, spot index) per row

    def __post_init__(self):
        if self.embeddings.shape[0] != self.expressions.shape[0]:
            raise ValueError("RetrievalIndex: embeddings/expressions row counts differ")
        if len(self.provenance) != self.embeddings.shape[0]:
            raise ValueError("RetrievalIndex: provenance length mismatch")
        _check_unit_rows(self.embeddings, "RetrievalIndex: embeddings")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    def slide_ids(self) -> set[str]:
        return {sid for sid, _ in self.provenance}


def _sequential_batches(n: int, batch_size: int) -> list[np.ndarray]:
    # index-order partition, remainder kept: every spot gets encoded
    return [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def encode_slide_spots(slide: Slide, checkpoint: Checkpoint) -> np.ndarray:
    """Embed every spot of a slide, batched the way training batches were sized."""
    cfg = checkpoint.encoder_config
    batch_size = checkpoint.train_config.batch_size
    out = np.empty((slide.spot_num, cfg.d_embed), dtype=np.float32)
    for batch in _sequential_batches(slide.spot_num, batch_size):
        out[batch] = enc.embed_spots(
            slide.expression[batch], slide.coords[batch], checkpoint.params, cfg
        )
    return out


def encode_slide_patches(slide: Slide, checkpoint: Checkpoint) -> np.ndarray:
    cfg = checkpoint.encoder_config
    batch_size = checkpoint.train_config.batch_size
    raw = slide.patches if slide.patches is not None else slide.features
    out = np.empty((slide.spot_num, cfg.d_embed), dtype=np.float32)
    for batch in _sequential_batches(slide.spot_num, batch_size):
        out[batch] = enc.embed_patches(raw[batch], checkpoint.params, cfg)
    return out


def build_index(checkpoint: Checkpoint, training_slides: list[Slide]) -> RetrievalIndex:
    """Encode every training spot and store it with its observed expression."""
    if not training_slides:
        raise ValueError("build_index: no training slides")
    cfg = checkpoint.encoder_config
    for s in training_slides:
        if s.gene_num != cfg.hvg_num:
            raise ValueError(f"build_index: {s.slide_id} has {s.gene_num} genes, checkpoint expects {cfg.hvg_num}")
    embeddings = []
    expressions = []
    provenance: list[tuple[str, int]] = []
    for slide in training_slides:
        embeddings.append(encode_slide_spots(slide, checkpoint))
        expressions.append(slide.expression)
        provenance.extend((slide.slide_id, i) for i in range(slide.spot_num))
    return RetrievalIndex(
        embeddings=np.concatenate(embeddings, axis=0),
        expressions=np.concatenate(expressions, axis=0).astype(np.float32),
        provenance=provenance,
    )


def query_topk(index: RetrievalIndex, h_query: np.ndarray, k: int) -> list[tuple[int, float, float]]:
    """Top-k reference rows by cosine (ties: lower row id), with Euclidean distances.

    Distances are computed directly in the embedding space; for unit vectors
    d^2 = 2 - 2 cos within float tolerance.
    """
    h_query = np.asarray(h_query).reshape(-1)
    if h_query.shape[0] != index.embeddings.shape[1]:
        raise ValueError(f"query_topk: query dim {h_query.shape[0]} != index dim {index.embeddings.shape[1]}")
    if not 1 <= k <= index.size:
        raise ValueError(f"query_topk: k={k} outside [1, {index.size}]")
    cosines = index.embeddings @ h_query
    order = np.argsort(-cosines, kind="stable")[:k]
    diffs = index.embeddings[order] - h_query
    dists = np.sqrt(np.sum(diffs * diffs, axis=1))
    return [(int(r), float(c), float(d)) for r, c, d in zip(order, cosines[order], dists)]


def aggregate(neighbors: list[tuple[int, float, float]], index: RetrievalIndex) -> np.ndarray:
    """Inverse-square-distance weighted average of the neighbors' expressions.

    Weights are d^-2 normalized to sum 1. A neighbor within NEAR_ZERO_DISTANCE
    is returned verbatim (the d -> 0 limit of the weighting).
    """
    if not neighbors:
        raise ValueError("aggregate: empty neighbor list")
    rows = np.array([n[0] for n in neighbors], dtype=np.int64)
    dists = np.array([n[2] for n in neighbors], dtype=np.float64)
    near = np.flatnonzero(dists < NEAR_ZERO_DISTANCE)
    if near.size:
        return index.expressions[rows[near[0]]].astype(np.float64)
    inv = dists**-2.0
    weights = inv / inv.sum()
    return weights @ index.expressions[rows].astype(np.float64)


def predict_slide(checkpoint: Checkpoint, index: RetrievalIndex, test_slide: Slide, k: int) -> np.ndarray:
    """Predict every spot of a held-out slide by embed -> query -> aggregate."""
    if test_slide.slide_id in index.slide_ids():
        raise LeakageError(f"predict_slide: {test_slide.slide_id} is present in the reference index")
    queries = encode_slide_patches(test_slide, checkpoint)
    pred = np.empty((test_slide.spot_num, index.expressions.shape[1]), dtype=np.float64)
    for i in range(test_slide.spot_num):
        pred[i] = aggregate(query_topk(index, queries[i], k), index)
    return pred


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_index(index: RetrievalIndex, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index.embeddings.astype("<f4").tofile(directory / "embeddings.f32")
    index.expressions.astype("<f4").tofile(directory / "expressions.f32")
    meta = {
        "rows": index.size,
        "d_embed": index.embeddings.shape[1],
        "hvg_num": index.expressions.shape[1],
        "entries": [[sid, i] for sid, i in index.provenance],
    }
    (directory / "provenance.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_index(directory: str | Path) -> RetrievalIndex:
    directory = Path(directory)
    meta = json.loads((directory / "provenance.json").read_text())
    n, d, g = meta["rows"], meta["d_embed"], meta["hvg_num"]
    embeddings = np.fromfile(directory / "embeddings.f32", dtype="<f4").reshape(n, d)
    expressions = np.fromfile(directory / "expressions.f32", dtype="<f4").reshape(n, g)
    provenance = [(str(sid), int(i)) for sid, i in meta["entries"]]
    return RetrievalIndex(embeddings=embeddings, expressions=expressions, provenance=provenance)
