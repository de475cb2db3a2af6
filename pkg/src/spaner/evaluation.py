"""Retrieval evaluation: embedding, top-k search, confusion, projections.

Everything here is read-only with respect to the model: no gradients,
no parameter mutation.  Queries and galleries are embedded to unit rows,
so inner product equals cosine similarity and ranking ties are broken
toward the lower gallery index.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .data import (KShotSplit, LabeledEmbeddings, SyntheticSpec, gen_synthetic,
                   kshot_split_paired, semantic_modality)
from .errors import ConfigError, DataError, DimensionError
from .model import SpanerModel, TrainConfig, fit, forward, init_model
from .tensor import Rng, no_grad, row_normalize

EMBED_CHUNK = 256


def embed_all(model: SpanerModel, data: LabeledEmbeddings,
              workers: int = 1) -> np.ndarray:
    """Unit-norm pooled embeddings for every row of one modality.

    Rows are processed in fixed-size chunks (parallelized when workers
    exceeds one) and reassembled in order, so the result does not depend
    on the worker count.
    """
    if data.count < 1:
        raise DataError(f"cannot embed an empty dataset for {data.modality!r}")
    if data.modality not in model.modalities:
        raise ConfigError(f"modality {data.modality!r} is not registered; "
                          f"registered: {sorted(model.modalities)}")
    if data.dim != model.modalities[data.modality]:
        raise DimensionError(
            f"modality {data.modality!r} rows have width {data.dim}, "
            f"model expects {model.modalities[data.modality]}")

    def one_chunk(start: int) -> np.ndarray:
        rows = data.vectors[start:start + EMBED_CHUNK]
        with no_grad():
            pooled = forward(model, {data.modality: rows})[data.modality].pooled
            return row_normalize(pooled).data

    starts = range(0, data.count, EMBED_CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one_chunk, starts))
    else:
        chunks = [one_chunk(s) for s in starts]
    return np.vstack(chunks)


def retrieve_topk(queries: np.ndarray, gallery: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k most similar gallery rows per query, best first.

    Equal similarities rank the lower gallery index first.
    """
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise DimensionError(
            f"queries {queries.shape} and gallery {gallery.shape} do not align")
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    if k > gallery.shape[0]:
        raise ConfigError(
            f"k={k} exceeds the gallery size {gallery.shape[0]}")
    sims = queries @ gallery.T
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


@dataclass
class RetrievalReport:
    """Top-k retrieval outcome for one query/gallery pairing."""

    k: int
    match: str
    queries: int
    hits: int
    accuracy: float
    indices: np.ndarray


def retrieval_accuracy(model: SpanerModel, query_data: LabeledEmbeddings,
                       gallery_data: LabeledEmbeddings, k: int = 1,
                       match: str = "class", workers: int = 1) -> RetrievalReport:
    """Fraction of queries whose top-k retrievals contain a match.

    Matching is by class label by default; "instance" requires the exact
    underlying instance to surface.
    """
    if match not in ("class", "instance"):
        raise ConfigError(f"match must be 'class' or 'instance', got {match!r}")
    if query_data.count < 1 or gallery_data.count < 1:
        raise DataError("retrieval needs non-empty query and gallery sets")
    q = embed_all(model, query_data, workers=workers)
    g = embed_all(model, gallery_data, workers=workers)
    indices = retrieve_topk(q, g, k)
    if match == "class":
        wanted = query_data.class_ids[:, None]
        got = gallery_data.class_ids[indices]
    else:
        wanted = query_data.instance_ids[:, None]
        got = gallery_data.instance_ids[indices]
    hit_rows = np.any(got == wanted, axis=1)
    hits = int(hit_rows.sum())
    return RetrievalReport(k=k, match=match, queries=query_data.count, hits=hits,
                           accuracy=hits / query_data.count, indices=indices)


@dataclass
class ConfusionMatrix:
    """How often a query from class i retrieves a row of class j (top-1)."""

    counts: np.ndarray
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def diagonal_fraction(self) -> float:
        return float(np.trace(self.counts)) / self.total


def confusion_matrix(model: SpanerModel, query_data: LabeledEmbeddings,
                     gallery_data: LabeledEmbeddings,
                     workers: int = 1) -> ConfusionMatrix:
    """Count top-1 retrieval outcomes per (query class, retrieved class)."""
    if query_data.class_names != gallery_data.class_names:
        raise DataError(
            f"query and gallery class vocabularies differ: "
            f"{query_data.class_names} vs {gallery_data.class_names}")
    report = retrieval_accuracy(model, query_data, gallery_data, k=1,
                                workers=workers)
    classes = len(query_data.class_names)
    counts = np.zeros((classes, classes), dtype=np.int64)
    retrieved = gallery_data.class_ids[report.indices[:, 0]]
    np.add.at(counts, (query_data.class_ids, retrieved), 1)
    return ConfusionMatrix(counts=counts, class_names=list(query_data.class_names))


def top_confusions(matrix: ConfusionMatrix,
                   n: int) -> list[tuple[str, str, int]]:
    """The n most frequent off-diagonal cells, as (query, retrieved, count).

    Ordered by count descending, then class-index pairs ascending; cells
    that never occurred are omitted.
    """
    if n < 0:
        raise ConfigError(f"top_confusions needs n >= 0, got {n}")
    cells = []
    classes = matrix.counts.shape[0]
    for i in range(classes):
        for j in range(classes):
            if i != j and matrix.counts[i, j] > 0:
                cells.append((-int(matrix.counts[i, j]), i, j))
    cells.sort()
    return [(matrix.class_names[i], matrix.class_names[j], -negative)
            for negative, i, j in cells[:n]]


@dataclass
class Projection2D:
    """Two-component principal projection of a set of embeddings."""

    coords: np.ndarray
    components: np.ndarray
    explained: np.ndarray


def _power_iterate(cov: np.ndarray, start: np.ndarray, against: np.ndarray | None,
                   tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w = cov @ v
        if against is not None:
            w = w - against * (against @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return v, float(v @ cov @ v)


def pca_project_2d(vectors: np.ndarray, tol: float = 1e-10,
                   max_iter: int = 1000) -> Projection2D:
    """Project rows onto their top two principal axes.

    Components come from power iteration with deflation on the centered
    scatter matrix; each component's first non-negligible loading is
    flipped positive so the output is reproducible.  Data whose centered
    rank is below two is rejected.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"pca needs [rows x dim], got {x.shape}")
    if x.shape[0] < 3:
        raise DataError(f"pca needs at least 3 rows, got {x.shape[0]}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered
    diag = np.diag(cov)
    if float(diag.max()) <= tol:
        raise DataError("pca input has rank 0 after centering")
    start = np.zeros(x.shape[1])
    start[int(np.argmax(diag))] = 1.0
    first, lead = _power_iterate(cov, start, None, tol, max_iter)
    deflated = cov - lead * np.outer(first, first)
    residual = np.diag(deflated)
    second_start = np.zeros(x.shape[1])
    second_start[int(np.argmax(residual))] = 1.0
    second_start -= first * (first @ second_start)
    if np.linalg.norm(second_start) == 0.0:
        second_start = start
    second, trail = _power_iterate(deflated, second_start, first, tol, max_iter)
    if trail <= tol * max(lead, 1.0):
        raise DataError("pca input has rank below 2 after centering")
    components = np.stack([first, second], axis=1)
    for col in range(2):
        loadings = components[:, col]
        visible = np.flatnonzero(np.abs(loadings) > 1e-9)
        if visible.size and loadings[visible[0]] < 0.0:
            components[:, col] = -loadings
    return Projection2D(coords=centered @ components, components=components,
                        explained=np.array([lead, trail]))


@dataclass
class KShotRow:
    """One (shot count, direction) cell: per-seed accuracies and summary."""

    k: int
    direction: str
    accuracies: tuple[float, ...]
    mean: float
    sd: float


@dataclass
class KShotTable:
    """Few-shot retrieval accuracies across seeds."""

    rows: list[KShotRow]

    def cell(self, k: int, direction: str) -> KShotRow:
        for row in self.rows:
            if row.k == k and row.direction == direction:
                return row
        raise KeyError(f"no cell for k={k}, direction={direction!r}")


def _parse_direction(direction: str, tags: list[str]) -> tuple[str, str]:
    parts = direction.split("->")
    if len(parts) != 2 or not parts[0] or not parts[1]:
        raise ConfigError(
            f"direction {direction!r} must look like 'query->gallery'")
    query, gallery = parts
    if query != "semantic" and query not in tags:
        raise ConfigError(f"direction {direction!r} queries unknown modality "
                          f"{query!r}; have {tags}")
    if gallery not in tags:
        raise ConfigError(f"direction {direction!r} targets unknown modality "
                          f"{gallery!r}; have {tags}")
    return query, gallery


def kshot_experiment(spec: SyntheticSpec, k_values: Sequence[int],
                     directions: Sequence[str], train_config: TrainConfig,
                     seeds: Sequence[int], workers: int = 1) -> KShotTable:
    """Train on k support instances per class, evaluate retrieval, repeat.

    For every seed the dataset is regenerated, split, and a fresh model
    is trained on the support rows of the first two modalities.  Queries
    come from the held-out rows (or the semantic prototypes), galleries
    from the held-out rows of the target modality.  Identical seed lists
    give identical tables.
    """
    if not k_values:
        raise ConfigError("k_values must be non-empty")
    if not seeds:
        raise ConfigError("seeds must be non-empty")
    if len(spec.modalities) < 2:
        raise ConfigError("k-shot experiments need at least two modalities")
    tags = [m.tag for m in spec.modalities]
    parsed = [(d, _parse_direction(d, tags)) for d in directions]
    if not parsed:
        raise ConfigError("directions must be non-empty")
    pair = (tags[0], tags[1])

    per_cell: dict[tuple[int, str], list[float]] = {
        (k, d): [] for k in k_values for d, _ in parsed}
    for seed in seeds:
        seeded = replace(spec, seed=int(seed))
        data = gen_synthetic(seeded)
        prototypes = semantic_modality(seeded)
        for k in k_values:
            split_rng, init_rng, fit_rng = Rng(int(seed)).split(3)
            splits = kshot_split_paired(data, k, split_rng)
            model = init_model(train_config,
                               [(t, data[t].dim) for t in tags], init_rng)
            fit(model, {t: splits[t].support.vectors for t in pair}, pair,
                train_config, rng=fit_rng)
            for direction, (query_tag, gallery_tag) in parsed:
                query = prototypes if query_tag == "semantic" \
                    else splits[query_tag].query
                report = retrieval_accuracy(model, query,
                                            splits[gallery_tag].query,
                                            workers=workers)
                per_cell[(k, direction)].append(report.accuracy)

    rows = []
    for k in k_values:
        for direction, _ in parsed:
            accs = per_cell[(k, direction)]
            mean = float(np.mean(accs))
            sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
            rows.append(KShotRow(k=int(k), direction=direction,
                                 accuracies=tuple(accs), mean=mean, sd=sd))
    return KShotTable(rows)
