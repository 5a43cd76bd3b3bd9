"""Retrieval evaluation: cosine ranking, CMC, mAP, and report formatting.

Protocol: gallery entries with the query's identity and camera are excluded
per query; junk identities (0 and -1) never count as ranked or relevant.
Queries with no relevant gallery entry are excluded from the averages.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import JUNK_IDENTITIES, parse_image_name

CMC_RANKS = (1, 5, 10)


class EvalError(ValueError):
    """Raised for descriptor dumps that cannot be evaluated."""


@dataclass(frozen=True)
class Ranking:
    """Gallery ids ordered by descending similarity for one query."""

    query_id: str
    gallery_ids: tuple[str, ...]
    similarities: tuple[float, ...]


def cosine_similarities(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """dot(a, b) / (|a||b|) per gallery row; zero-norm vectors give 0."""
    if query.shape[-1] != gallery.shape[-1]:
        raise EvalError(
            f"descriptor dimensions differ: query {query.shape[-1]}, "
            f"gallery {gallery.shape[-1]}"
        )
    qn = np.linalg.norm(query)
    gn = np.linalg.norm(gallery, axis=1)
    denom = qn * gn
    sims = np.zeros(gallery.shape[0])
    ok = denom > 0
    sims[ok] = (gallery[ok] @ query) / denom[ok]
    return sims


def cosine_rank(
    query_id: str, query: np.ndarray, gallery: dict[str, np.ndarray]
) -> Ranking:
    """Rank gallery entries by cosine similarity, ties broken by gallery id."""
    ids = list(gallery)
    mat = np.stack([gallery[g] for g in ids])
    sims = cosine_similarities(query, mat)
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return Ranking(
        query_id=query_id,
        gallery_ids=tuple(ids[i] for i in order),
        similarities=tuple(float(sims[i]) for i in order),
    )


def average_precision(relevance: np.ndarray) -> float:
    """Mean of precision@p over the relevant positions p (1-based)."""
    relevance = np.asarray(relevance, dtype=np.float64)
    n_rel = relevance.sum()
    if n_rel == 0:
        raise EvalError("average precision needs at least one relevant item")
    hits = np.cumsum(relevance)
    positions = np.arange(1, relevance.size + 1)
    return float(((hits / positions) * relevance).sum() / n_rel)


def cmc_curve(relevance_lists: list[np.ndarray], ranks=CMC_RANKS) -> dict[int, float]:
    """Fraction of queries with a relevant item within the top k."""
    hits = {k: 0 for k in ranks}
    for rel in relevance_lists:
        first = np.flatnonzero(rel)
        if first.size == 0:
            continue
        for k in ranks:
            if first[0] < k:
                hits[k] += 1
    n = len(relevance_lists)
    return {k: hits[k] / n for k in ranks}


def multi_query_descriptor(descriptors: list[np.ndarray]) -> np.ndarray:
    """Pool same-identity same-camera query descriptors by elementwise mean."""
    if not descriptors:
        raise EvalError("multi-query pooling needs at least one descriptor")
    return np.mean(np.stack(descriptors), axis=0)


@dataclass(frozen=True)
class EvalReport:
    rank1: float
    rank5: float
    rank10: float
    mean_ap: float
    query_count: int
    protocol: str

    def csv_rows(self) -> list[tuple[str, str]]:
        return [
            ("protocol", self.protocol),
            ("queries", str(self.query_count)),
            ("rank1", f"{self.rank1:.6f}"),
            ("rank5", f"{self.rank5:.6f}"),
            ("rank10", f"{self.rank10:.6f}"),
            ("mAP", f"{self.mean_ap:.6f}"),
        ]

    def text(self) -> str:
        return (
            f"{self.protocol}-query over {self.query_count} queries: "
            f"rank-1 {self.rank1:.4f}, rank-5 {self.rank5:.4f}, "
            f"rank-10 {self.rank10:.4f}, mAP {self.mean_ap:.4f}"
        )


def write_report_csv(path: str | Path, report: EvalReport) -> None:
    lines = ["metric,value"] + [f"{k},{v}" for k, v in report.csv_rows()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _identity_camera(image_id: str) -> tuple[int, int]:
    parsed = parse_image_name(image_id)
    if parsed is None:
        raise EvalError(f"cannot parse identity/camera from image id {image_id!r}")
    return parsed[0], parsed[1]


def evaluate_retrieval(
    query_descs: dict[str, np.ndarray],
    gallery_descs: dict[str, np.ndarray],
    protocol: str = "single",
) -> EvalReport:
    """Rank every query against the gallery and aggregate CMC and mAP."""
    if protocol not in ("single", "multi"):
        raise EvalError(f"protocol must be 'single' or 'multi', got {protocol!r}")
    gallery_meta = {}
    for gid in gallery_descs:
        ident, cam = _identity_camera(gid)
        if ident in JUNK_IDENTITIES:
            continue
        gallery_meta[gid] = (ident, cam)
    if not gallery_meta:
        raise EvalError("gallery holds no usable entries")

    queries: list[tuple[str, int, int, np.ndarray]] = []
    if protocol == "single":
        for qid, vec in query_descs.items():
            ident, cam = _identity_camera(qid)
            if ident in JUNK_IDENTITIES:
                continue
            queries.append((qid, ident, cam, vec))
    else:
        groups: dict[tuple[int, int], list[np.ndarray]] = {}
        for qid, vec in query_descs.items():
            ident, cam = _identity_camera(qid)
            if ident in JUNK_IDENTITIES:
                continue
            groups.setdefault((ident, cam), []).append(vec)
        for (ident, cam), vecs in sorted(groups.items()):
            queries.append(
                (f"{ident:04d}_c{cam}_multi", ident, cam, multi_query_descriptor(vecs))
            )
    if not queries:
        raise EvalError("no usable queries")

    relevance_lists: list[np.ndarray] = []
    aps: list[float] = []
    for qid, ident, cam, vec in queries:
        valid = {
            gid: gallery_descs[gid]
            for gid, (gident, gcam) in gallery_meta.items()
            if not (gident == ident and gcam == cam)
        }
        if not valid:
            continue
        ranking = cosine_rank(qid, vec, valid)
        rel = np.array(
            [gallery_meta[gid][0] == ident for gid in ranking.gallery_ids],
            dtype=np.float64,
        )
        if rel.sum() == 0:
            continue  # nothing retrievable for this query
        relevance_lists.append(rel)
        aps.append(average_precision(rel))
    if not relevance_lists:
        raise EvalError("no query has a relevant gallery entry")
    cmc = cmc_curve(relevance_lists)
    return EvalReport(
        rank1=cmc[1],
        rank5=cmc[5],
        rank10=cmc[10],
        mean_ap=float(np.mean(aps)),
        query_count=len(relevance_lists),
        protocol=protocol,
    )
