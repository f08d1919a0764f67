"""Retrieval ranking and metrics (imAP, tmAP, CMC) plus attention-landmark mass."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np


@dataclass
class RankingResult:
    query: int
    order: np.ndarray      # gallery indices, best first
    relevant: np.ndarray   # bool, aligned with ``order``
    junk: np.ndarray       # bool, aligned with ``order``

    def kept_relevance(self) -> np.ndarray:
        return self.relevant[~self.junk]


def similarity_matrix(queries, gallery) -> np.ndarray:
    """Cosine similarity between every query row and every gallery row."""
    q = np.atleast_2d(np.asarray(getattr(queries, "data", queries), dtype=np.float64))
    g = np.atleast_2d(np.asarray(getattr(gallery, "data", gallery), dtype=np.float64))
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(gn == 0):
        raise ValueError("zero-norm embedding in similarity computation")
    return np.clip((q / qn) @ (g / gn).T, -1.0, 1.0)


def rank(scores: np.ndarray, query: int, q_id: int, g_ids: np.ndarray,
         q_cam: Optional[int] = None, g_cams: Optional[np.ndarray] = None) -> RankingResult:
    """Order gallery entries by descending score, ties by ascending index.

    With camera ids, gallery entries of the query's identity seen by the
    query's camera are marked junk.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    ids = np.asarray(g_ids)[order]
    relevant = ids == q_id
    if q_cam is not None and g_cams is not None:
        junk = relevant & (np.asarray(g_cams)[order] == q_cam)
    else:
        junk = np.zeros_like(relevant)
    return RankingResult(query, order, relevant & ~junk, junk)


def average_precision(ranking: RankingResult) -> Optional[float]:
    """Mean of precision@hit over relevant hits; None when nothing is relevant."""
    rel = ranking.kept_relevance()
    n_rel = int(rel.sum())
    if n_rel == 0:
        return None
    positions = np.flatnonzero(rel) + 1
    hits = np.arange(1, n_rel + 1)
    return float(np.mean(hits / positions))


def cmc(rankings: Iterable[RankingResult], ks: Sequence[int] = (1, 5)) -> Dict[int, float]:
    """Fraction of (scorable) queries with a relevant item within the first k."""
    first_hits = []
    for r in rankings:
        rel = r.kept_relevance()
        if rel.any():
            first_hits.append(int(np.argmax(rel)))
    if not first_hits:
        return {k: 0.0 for k in ks}
    first = np.array(first_hits)
    return {k: float(np.mean(first < k)) for k in ks}


def image_rankings(sim: np.ndarray, q_ids, g_ids, q_cams=None, g_cams=None) -> List[RankingResult]:
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    use_cams = q_cams is not None and g_cams is not None
    return [rank(sim[i], i, q_ids[i], g_ids,
                 q_cams[i] if use_cams else None, g_cams if use_cams else None)
            for i in range(len(q_ids))]


def mean_ap(rankings: Iterable[RankingResult]):
    """Return (mAP over scorable queries, number of excluded queries)."""
    aps = [average_precision(r) for r in rankings]
    valid = [a for a in aps if a is not None]
    return (float(np.mean(valid)) if valid else 0.0), len(aps) - len(valid)


def imap(sim, q_ids, g_ids, q_cams=None, g_cams=None) -> float:
    return mean_ap(image_rankings(sim, q_ids, g_ids, q_cams, g_cams))[0]


def track_rankings(sim: np.ndarray, q_ids, g_ids, g_tracks, q_cams=None,
                   g_cams=None) -> List[RankingResult]:
    """Rank gallery tracks; a track scores the max similarity over its images."""
    g_tracks = np.asarray(g_tracks)
    tracks, first = np.unique(g_tracks, return_index=True)
    member = g_tracks[None, :] == tracks[:, None]
    t_ids = np.asarray(g_ids)[first]
    t_cams = None if g_cams is None else np.asarray(g_cams)[first]
    t_scores = np.where(member[None, :, :], sim[:, None, :], -np.inf).max(axis=2)
    return image_rankings(t_scores, q_ids, t_ids, q_cams, t_cams)


def tmap(sim, q_ids, g_ids, g_tracks, q_cams=None, g_cams=None) -> float:
    return mean_ap(track_rankings(sim, q_ids, g_ids, g_tracks, q_cams, g_cams))[0]


def retrieval_report(query_emb, gallery_emb, q_ids, g_ids, q_cams=None, g_cams=None,
                     g_tracks=None) -> dict:
    """Metrics JSON object: imap, tmap, top1, top5, n_queries, n_excluded."""
    sim = similarity_matrix(query_emb, gallery_emb)
    ranks = image_rankings(sim, q_ids, g_ids, q_cams, g_cams)
    im, excluded = mean_ap(ranks)
    top = cmc(ranks, (1, 5))
    if g_tracks is None:
        tm = im
    else:
        tm = mean_ap(track_rankings(sim, q_ids, g_ids, g_tracks, q_cams, g_cams))[0]
    return {"imap": im, "tmap": tm, "top1": top[1], "top5": top[5],
            "n_queries": len(ranks), "n_excluded": excluded}


def per_query_tsv(ranks: Sequence[RankingResult]) -> str:
    lines = ["query\tap\tfirst_hit"]
    for r in ranks:
        ap = average_precision(r)
        rel = r.kept_relevance()
        first = int(np.argmax(rel)) + 1 if rel.any() else -1
        lines.append(f"{r.query}\t{'' if ap is None else repr(ap)}\t{first}")
    return "\n".join(lines) + "\n"


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True)


def attention_landmark_mass(Q: np.ndarray, landmarks, radius: int = 1) -> float:
    """Attention mass inside the union of Chebyshev balls around landmark cells."""
    Q = np.asarray(getattr(Q, "data", Q))
    if len(landmarks) == 0:
        raise ValueError("attention_landmark_mass needs at least one landmark")
    h, w = Q.shape
    uu, vv = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    mask = np.zeros((h, w), dtype=bool)
    for u, v in landmarks:
        mask |= (np.abs(uu - int(u)) <= radius) & (np.abs(vv - int(v)) <= radius)
    return float(Q[mask].sum())


def landmarks_to_grid(landmarks, stride: int = 8) -> List[tuple]:
    """Pixel landmarks ``(name, u, v)`` to attention-grid cells by integer division."""
    return [(int(u) // stride, int(v) // stride) for _, u, v in landmarks]
