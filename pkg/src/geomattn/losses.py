"""Classification heads and loss terms of the combined objective."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, as_tensor, clamp_min, log, make, matmul, relu
from .nn import BatchNorm, CosineClassifier, Module

TERM_NAMES = ("l_tri_gb", "l_sce_gb", "l_tri_gfb", "l_sce_gfb", "l_slb")
PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    tri_gb: float = 0.5
    sce_gb: float = 0.5
    tri_gfb: float = 0.5
    sce_gfb: float = 0.5
    slb: float = 1.0
    margin: float = 0.5
    smoothing_eps: float = 0.1

    def __post_init__(self):
        for name in ("tri_gb", "sce_gb", "tri_gfb", "sce_gfb", "slb"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if not 0.0 <= self.smoothing_eps < 1.0:
            raise ValueError(f"smoothing_eps must lie in [0, 1), got {self.smoothing_eps}")

    def as_tuple(self) -> tuple:
        return (self.tri_gb, self.sce_gb, self.tri_gfb, self.sce_gfb, self.slb)


@dataclass
class LossReport:
    l_tri_gb: float
    l_sce_gb: float
    l_tri_gfb: float
    l_sce_gfb: float
    l_slb: float
    total: float
    step: int = 0
    active_triplets: Dict[str, int] = field(default_factory=dict)
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def terms(self) -> tuple:
        return tuple(getattr(self, n) for n in TERM_NAMES)

    def to_record(self) -> dict:
        rec = {"step": self.step}
        rec.update({n: getattr(self, n) for n in TERM_NAMES})
        rec["total"] = self.total
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        rec = json.loads(line)
        return cls(**{n: rec[n] for n in TERM_NAMES}, total=rec["total"], step=rec["step"])


def cosine_scores(f: Tensor, head: CosineClassifier) -> Tensor:
    """``gamma * cos(f, w_j)`` for every class row ``w_j``; ``f`` is [d] or [n, d]."""
    f = as_tensor(f)
    if np.any(np.linalg.norm(f.data, axis=-1) == 0):
        raise ValueError("cosine classifier received a zero-norm embedding")
    if np.any(np.linalg.norm(head.weight.data, axis=-1) == 0):
        raise ValueError("cosine classifier has a zero-norm weight row")
    single = f.ndim == 1
    fn = F.l2_normalize(f.reshape(1, -1) if single else f, axis=-1)
    wn = F.l2_normalize(head.weight, axis=-1)
    scores = matmul(fn, wn.T) * head.gamma
    return scores.reshape(-1) if single else scores


def cosine_logits(f: Tensor, head: CosineClassifier) -> Tensor:
    """Class probabilities ``softmax_j(gamma * cos(f, w_j))``."""
    return F.softmax(cosine_scores(f, head), axis=-1)


def _labels(y, n_classes: int, batch: Optional[int]) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y.data if isinstance(y, Tensor) else y)).astype(np.int64)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"class index out of range [0, {n_classes}): {y.tolist()}")
    if batch is not None and y.shape[0] != batch:
        raise ValueError(f"{y.shape[0]} labels for a batch of {batch}")
    return y


def cross_entropy(probs: Tensor, y) -> Tensor:
    """``-log probs[y]`` with probabilities clamped below at 1e-12; batch mean for [n, b]."""
    probs = as_tensor(probs)
    single = probs.ndim == 1
    p2 = probs.reshape(1, -1) if single else probs
    y = _labels(y, p2.shape[1], p2.shape[0])
    picked = p2[np.arange(p2.shape[0]), y]
    return (-log(clamp_min(picked, PROB_FLOOR))).mean()


def smoothed_cross_entropy(logits: Tensor, y, eps: float = 0.1) -> Tensor:
    """Label-smoothed cross entropy: target ``(1-eps)*onehot + eps/n``; batch mean."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.reshape(1, -1) if single else logits
    n, n_id = z.shape
    if n_id < 2:
        raise ValueError(f"need at least 2 classes, got {n_id}")
    y = _labels(y, n_id, n)
    target = np.full((n, n_id), eps / n_id)
    target[np.arange(n), y] += 1.0 - eps
    return -(F.log_softmax(z, axis=-1) * target).sum() * (1.0 / n)


def _row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row; zero gradient for a zero row."""
    n = np.sqrt((x.data ** 2).sum(axis=-1))
    safe = np.where(n > 0, n, 1.0)

    def backward(g):
        return (np.where((n > 0)[:, None], x.data / safe[:, None], 0.0) * g[:, None],)

    return make(n, (x,), backward, "row_norm")


def pairwise_distances(e: np.ndarray) -> np.ndarray:
    diff = e[:, None, :] - e[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def hard_pairs(dist: np.ndarray, labels: np.ndarray):
    """Hardest positive/negative index per anchor, plus the mask of usable anchors."""
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    valid = pos.any(1) & neg.any(1)
    hardest_pos = np.argmax(np.where(pos, dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(neg, dist, np.inf), axis=1)
    return hardest_pos, hardest_neg, valid


def batch_hard_triplet(embeddings: Tensor, labels, margin: float = 0.5,
                       return_active: bool = False):
    """Batch-hard triplet loss on Euclidean distances, averaged over usable anchors."""
    embeddings = as_tensor(embeddings)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ValueError(f"embeddings {embeddings.shape} do not match {labels.shape[0]} labels")
    if np.unique(labels).size < 2:
        raise ValueError("batch_hard_triplet needs at least two identities in the batch")
    hp, hn, valid = hard_pairs(pairwise_distances(embeddings.data), labels)
    if not valid.any():
        raise ValueError("no anchor in the batch has both a positive and a negative")
    a = np.flatnonzero(valid)
    d_ap = _row_norm(embeddings[a] - embeddings[hp[a]])
    d_an = _row_norm(embeddings[a] - embeddings[hn[a]])
    per_anchor = relu(d_ap - d_an + margin)
    loss = per_anchor.mean()
    if return_active:
        return loss, int((per_anchor.data > 0).sum())
    return loss


class BNNeck(Module):
    """Pre-BN feature to the triplet loss, post-BN feature to the identity head."""

    def __init__(self, d: int):
        self.bn = BatchNorm(d, eps=1e-10)

    def forward(self, feature: Tensor):
        return bnneck_split(feature, self)


def bnneck_split(feature: Tensor, neck: BNNeck):
    feature = as_tensor(feature)
    single = feature.ndim == 1
    x = feature.reshape(1, -1) if single else feature
    out = neck.bn(x)
    return feature, (out.reshape(-1) if single else out)


def total_loss(terms: Union[Sequence, Dict[str, object]], w: LossWeights,
               step: int = 0) -> LossReport:
    """Weighted sum of the five terms; Tensor terms give a differentiable ``total_tensor``."""
    if isinstance(terms, dict):
        terms = [terms.get(n, 0.0) for n in TERM_NAMES]
    terms = list(terms)
    if len(terms) != 5:
        raise ValueError(f"expected 5 loss terms, got {len(terms)}")
    lam = w.as_tuple()
    values = [t.item() if isinstance(t, Tensor) else float(t) for t in terms]
    tensor_total = None
    constant = 0.0
    for lam_i, t in zip(lam, terms):
        if isinstance(t, Tensor):
            contrib = t * lam_i
            tensor_total = contrib if tensor_total is None else tensor_total + contrib
        else:
            constant += lam_i * float(t)
    if tensor_total is not None and constant:
        tensor_total = tensor_total + constant
    total = sum(lam_i * v for lam_i, v in zip(lam, values))
    return LossReport(*values, total=total, step=step, total_tensor=tensor_total)
