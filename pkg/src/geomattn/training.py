"""Training step, training loop, checkpoints and evaluation."""

from __future__ import annotations

import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

from .autodiff import gatn
from .autodiff.tensor import Tensor
from .config import RunConfig
from .data.augment import AugmentConfig, augment_batch
from .data.manifest import Manifest, load_dataset
from .data.sampler import PKSampler
from .losses import (LossReport, LossWeights, batch_hard_triplet, cross_entropy, total_loss,
                     smoothed_cross_entropy)
from .metrics import retrieval_report
from .model import GeomAttnModel, ModelConfig
from .nn import Adam
from .selfsup import make_rotation_batch, stack_samples

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term} is not finite ({value})")
        self.term = term


@dataclass
class Batch:
    images: np.ndarray      # augmented, fed to the ReID branches
    raw: np.ndarray         # un-augmented, fed to the rotation branch
    labels: np.ndarray      # dense training identity labels


def train_step(batch: Batch, model: GeomAttnModel, optimizer: Adam, weights: LossWeights,
               rng: np.random.Generator, step: int = 0, all_four: bool = False) -> LossReport:
    """Compute the five loss terms, backpropagate the weighted total, apply one update."""
    model.train()
    optimizer.zero_grad()
    model.zero_grad()
    out = model.forward_train(Tensor(batch.images))
    terms: Dict[str, object] = {}
    active = {}
    terms["l_tri_gb"], active["gb"] = batch_hard_triplet(out.f_gb, batch.labels, weights.margin,
                                                         return_active=True)
    terms["l_sce_gb"] = smoothed_cross_entropy(out.logits_gb, batch.labels, weights.smoothing_eps)
    if out.f_gfb is not None:
        terms["l_tri_gfb"], active["gfb"] = batch_hard_triplet(
            out.f_gfb, batch.labels, weights.margin, return_active=True)
        terms["l_sce_gfb"] = smoothed_cross_entropy(out.logits_gfb, batch.labels,
                                                    weights.smoothing_eps)
    if weights.slb > 0:
        images, rot = stack_samples(make_rotation_batch(batch.raw, rng, all_four))
        terms["l_slb"] = cross_entropy(model.rotation_probs(images), rot)
    for name, t in terms.items():
        value = t.item()
        if not np.isfinite(value):
            raise NonFiniteLossError(name, value)
    report = total_loss(terms, weights, step=step)
    report.active_triplets = active
    report.total_tensor.backward()
    optimizer.step()
    return report


# -- checkpoints ---------------------------------------------------------------

MODEL_KEYS = ("n_ids", "widths", "K", "in_channels", "use_gfb", "use_iam", "gamma_init",
              "attn_shift", "seed")


def _write_bundle(path: Path, index_path: Path, arrays: Dict[str, np.ndarray]) -> None:
    offset = 0
    rows = ["name\tshape\toffset"]
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            blob = gatn.dumps(arr)
            fh.write(blob)
            rows.append(f"{name}\t{','.join(map(str, arr.shape))}\t{offset}")
            offset += len(blob)
    index_path.write_text("\n".join(rows) + "\n")


def _read_bundle(path: Path, index_path: Path) -> Dict[str, np.ndarray]:
    data = path.read_bytes()
    out = {}
    for line in index_path.read_text().splitlines()[1:]:
        name, shape, offset = line.split("\t")
        arr = gatn.read(io.BytesIO(data[int(offset):]))
        expect = tuple(int(s) for s in shape.split(",") if s)
        if arr.shape != expect:
            raise ValueError(f"{name}: container shape {arr.shape} != manifest shape {expect}")
        out[name] = arr
    return out


def save_checkpoint(directory, model: GeomAttnModel, optimizer: Optional[Adam] = None,
                    run_config: Optional[RunConfig] = None) -> Path:
    """Write params.gatn + manifest.tsv, optim.gatn + optim.tsv, model.cfg."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_bundle(d / "params.gatn", d / "manifest.tsv", model.state_dict())
    if optimizer is not None:
        _write_bundle(d / "optim.gatn", d / "optim.tsv", optimizer.state())
    cfg = model.cfg
    lines = []
    for key in MODEL_KEYS:
        val = getattr(cfg, key)
        if isinstance(val, tuple):
            val = ",".join(map(str, val))
        lines.append(f"{key} = {val}")
    (d / "model.cfg").write_text("\n".join(lines) + "\n")
    if run_config is not None:
        run_config.save(d / "run.cfg")
    return d


def load_checkpoint(path, n_ids: Optional[int] = None) -> GeomAttnModel:
    """Rebuild a model from a checkpoint directory (or any file inside it)."""
    d = Path(path)
    if d.is_file():
        d = d.parent
    raw = {}
    for line in (d / "model.cfg").read_text().splitlines():
        key, value = (p.strip() for p in line.split("=", 1))
        raw[key] = value
    cfg = ModelConfig(
        n_ids=int(raw["n_ids"]), widths=tuple(int(v) for v in raw["widths"].split(",")),
        K=int(raw["K"]), in_channels=int(raw["in_channels"]), use_gfb=raw["use_gfb"] == "True",
        use_iam=raw["use_iam"] == "True", gamma_init=float(raw["gamma_init"]),
        attn_shift=float(raw.get("attn_shift", 0.0)), seed=int(raw["seed"]))
    if n_ids is not None and n_ids != cfg.n_ids:
        raise ValueError(f"checkpoint classifies {cfg.n_ids} identities, data has {n_ids}")
    model = GeomAttnModel(cfg)
    model.load_state_dict(_read_bundle(d / "params.gatn", d / "manifest.tsv"))
    return model


# -- training loop ----------------------------------------------------------------

def dense_labels(ids: np.ndarray) -> np.ndarray:
    _, inv = np.unique(ids, return_inverse=True)
    return inv.astype(np.int64)


def build_model(cfg: RunConfig, n_ids: int) -> GeomAttnModel:
    return GeomAttnModel(ModelConfig(n_ids=n_ids, widths=tuple(cfg.widths), K=cfg.K,
                                     use_gfb=cfg.use_gfb, use_iam=cfg.use_iam,
                                     gamma_init=cfg.gamma_init, attn_shift=cfg.attn_shift,
                                     seed=cfg.seed))


def evaluate(model: GeomAttnModel, manifest: Manifest, images: Optional[np.ndarray] = None) -> dict:
    """Retrieval metrics of the concatenated embedding on the query/gallery split."""
    q_idx, g_idx = manifest.split("query"), manifest.split("gallery")
    if images is None:
        qi, gi = manifest.load_images(q_idx), manifest.load_images(g_idx)
    else:
        qi, gi = images[q_idx], images[g_idx]
    q_emb = model.forward_infer(qi).concat
    g_emb = model.forward_infer(gi).concat
    rec = manifest.records
    col = lambda idx, attr: np.array([getattr(rec[i], attr) for i in idx])
    return retrieval_report(q_emb, g_emb, col(q_idx, "identity"), col(g_idx, "identity"),
                            col(q_idx, "camera"), col(g_idx, "camera"), col(g_idx, "track"))


@dataclass
class TrainResult:
    model: GeomAttnModel
    reports: list
    metrics: Optional[dict]
    seconds: float


def train(cfg: RunConfig, manifest: Optional[Manifest] = None, out_dir=None,
          images: Optional[np.ndarray] = None, evaluate_at_end: bool = True,
          on_step: Optional[Callable[[LossReport], None]] = None) -> TrainResult:
    """Train on the manifest's train split; optionally write logs and a checkpoint."""
    t0 = time.perf_counter()
    manifest = load_dataset(cfg.data_dir) if manifest is None else manifest
    if images is None:
        images = manifest.load_images()
    train_idx = np.array(manifest.split("train"))
    labels = dense_labels(np.array([manifest.records[i].identity for i in train_idx]))
    n_ids = int(labels.max()) + 1
    model = build_model(cfg, n_ids)
    optimizer = Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                     weight_decay=cfg.weight_decay)
    weights = cfg.loss_weights()
    seq = np.random.SeedSequence(cfg.seed)
    s_sampler, s_aug, s_rot = seq.spawn(3)
    P = min(cfg.P, n_ids)
    if P < cfg.P:
        log.warning("only %d training identities: using P=%d instead of %d", n_ids, P, cfg.P)
    sampler = PKSampler(labels, P, cfg.K_img, seed=int(s_sampler.generate_state(1)[0]))
    aug_rng, rot_rng = np.random.default_rng(s_aug), np.random.default_rng(s_rot)
    train_images = images[train_idx]
    fill = train_images.mean(axis=(0, 2, 3))
    aug_cfg = AugmentConfig() if cfg.augment else AugmentConfig.disabled()

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss.jsonl", "w")
    reports = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            optimizer.lr = cfg.lr_at(epoch)
            for idx in sampler.epoch():
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                raw = train_images[idx]
                batch = Batch(augment_batch(raw, aug_rng, fill, aug_cfg), raw, labels[idx])
                report = train_step(batch, model, optimizer, weights, rot_rng, step,
                                    cfg.all_four_rotations)
                report.total_tensor = None
                reports.append(report)
                if log_fh is not None:
                    log_fh.write(report.to_json() + "\n")
                if on_step is not None:
                    on_step(report)
                step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    metrics = evaluate(model, manifest, images) if evaluate_at_end else None
    if out is not None:
        save_checkpoint(out / "ckpt", model, optimizer, cfg)
        if metrics is not None:
            (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True) + "\n")
    return TrainResult(model, reports, metrics, time.perf_counter() - t0)
