"""Cross-modality retrieval metrics and distance-distribution analysis."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import Dataset
from .modules import IR, VIS, FDNMModel
from .numerics.tensor import ShapeError, Tensor, no_grad

SUMMARY_RANKS = (1, 5, 10, 20)


def distance_matrix(q: np.ndarray, g: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ShapeError(f"embedding dims differ: query {q.shape} vs gallery {g.shape}")
    if metric == "euclidean":
        diff = q[:, None, :] - g[None, :, :]
        return np.sqrt((diff * diff).sum(-1))
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        # a zero vector is at distance 1 from everything
        qs = np.divide(q, qn, out=np.zeros_like(q), where=qn > 0)
        gs = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
        return np.clip(1.0 - qs @ gs.T, 0.0, 2.0)
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class RetrievalTable:
    query: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray
    metric: str = "euclidean"
    camera_filter: bool = False
    dist: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.dist is None:
            self.dist = distance_matrix(self.query, self.gallery, self.metric)


@dataclass
class RetrievalResult:
    cmc: np.ndarray
    mAP: float
    num_valid: int
    num_skipped: int  # queries without a valid match

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self) -> dict[str, float]:
        out = {f"rank{k}": self.rank(k) for k in SUMMARY_RANKS}
        out["mAP"] = self.mAP
        return out


def cmc_map(table: RetrievalTable) -> RetrievalResult:
    """CMC curve and mAP; gallery ties rank the lower index first.

    AP is accumulated as an exact rational and rounded once, so the result
    does not depend on summation order.
    """
    dist = np.asarray(table.dist)
    nq, ng = dist.shape
    if ng == 0:
        raise ValueError("empty gallery")
    hits_at = np.zeros(ng, dtype=np.int64)
    aps: list[Fraction] = []
    skipped = 0
    for i in range(nq):
        order = np.argsort(dist[i], kind="stable")
        keep = np.ones(ng, dtype=bool)
        if table.camera_filter:
            keep = ~((table.gallery_ids[order] == table.query_ids[i])
                     & (table.gallery_cams[order] == table.query_cams[i]))
        match = (table.gallery_ids[order] == table.query_ids[i])[keep]
        if not match.any():
            skipped += 1
            continue
        positions = np.flatnonzero(match)
        hits_at[positions[0]] += 1
        aps.append(sum(Fraction(j + 1, int(p) + 1) for j, p in enumerate(positions))
                   / positions.size)
    valid = len(aps)
    if valid == 0:
        raise ValueError("no query has a valid gallery match")
    cmc = np.cumsum(hits_at) / valid
    return RetrievalResult(cmc, float(sum(aps) / valid), valid, skipped)


@dataclass
class DistanceStats:
    intra: np.ndarray
    inter: np.ndarray
    bin_centers: np.ndarray
    intra_hist: np.ndarray
    inter_hist: np.ndarray

    @property
    def intra_mean(self) -> float:
        return float(self.intra.mean()) if self.intra.size else float("nan")

    @property
    def inter_mean(self) -> float:
        return float(self.inter.mean()) if self.inter.size else float("nan")

    @property
    def gap(self) -> float:
        return self.inter_mean - self.intra_mean


def distance_stats(embeddings: np.ndarray, ids, modalities, bins: int = 64) -> DistanceStats:
    """Cosine distances of every VIS x IR pair, split by identity agreement."""
    ids = np.asarray(ids)
    modalities = np.asarray(modalities)
    vis = np.flatnonzero(modalities == VIS)
    ir = np.flatnonzero(modalities == IR)
    if not vis.size or not ir.size:
        raise ValueError("distance_stats needs both VIS and IR samples")
    d = distance_matrix(embeddings[vis], embeddings[ir], "cosine")
    same = ids[vis][:, None] == ids[ir][None, :]
    edges = np.linspace(0.0, 2.0, bins + 1)
    intra, inter = d[same], d[~same]
    return DistanceStats(
        intra, inter, (edges[:-1] + edges[1:]) / 2,
        np.histogram(intra, edges)[0], np.histogram(inter, edges)[0],
    )


# -- model-level evaluation ----------------------------------------------------------
def retrieval_embeddings(model: FDNMModel, images: np.ndarray, modalities: np.ndarray,
                         batch_size: int = 128) -> np.ndarray:
    """Global and part post-BN embeddings, each L2-normalized, concatenated."""
    chunks = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[s:s + batch_size], dtype=model.dtype), dtype=model.dtype)
            out = model.forward(x, modalities[s:s + batch_size], training=False)
            segs = []
            for emb in out.head.embeddings:
                e = emb.data.astype(np.float64)
                n = np.linalg.norm(e, axis=1, keepdims=True)
                segs.append(np.divide(e, n, out=np.zeros_like(e), where=n > 0))
            chunks.append(np.concatenate(segs, axis=1))
    return np.concatenate(chunks, axis=0)


@dataclass
class EvalReport:
    result: RetrievalResult
    stats: DistanceStats
    embeddings: np.ndarray = field(repr=False)


def evaluate(model: FDNMModel, dataset: Dataset, metric: str = "euclidean",
             camera_filter: bool = False) -> EvalReport:
    """IR queries against the VIS gallery."""
    emb = retrieval_embeddings(model, dataset.images, dataset.modalities)
    q = dataset.modalities == IR
    g = dataset.modalities == VIS
    table = RetrievalTable(emb[q], dataset.identities[q], dataset.cameras[q],
                           emb[g], dataset.identities[g], dataset.cameras[g],
                           metric=metric, camera_filter=camera_filter)
    return EvalReport(cmc_map(table), distance_stats(emb, dataset.identities, dataset.modalities),
                      emb)


def _writer(fh):
    return csv.writer(fh, delimiter=",", lineterminator="\n")


def write_reports(report: EvalReport, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cmc.csv", "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(("rank", "value"))
        for r, v in enumerate(report.result.cmc, start=1):
            w.writerow((r, f"{v:.6f}"))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = _writer(fh)
        s = report.result.summary()
        w.writerow(tuple(s))
        w.writerow(tuple(f"{v:.6f}" for v in s.values()))
    with open(out / "dist_hist.csv", "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(("bin_center", "intra_count", "inter_count"))
        st = report.stats
        for c, a, b in zip(st.bin_centers, st.intra_hist, st.inter_hist):
            w.writerow((f"{c:.6f}", int(a), int(b)))


def summary_line(result: RetrievalResult) -> str:
    return ",".join(f"{v:.6f}" for v in result.summary().values())
