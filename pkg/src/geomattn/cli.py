"""Command-line entry point: ``geomattn {gen,config,train,eval,attn}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import PRESETS, RunConfig
from .data import pnm
from .data.manifest import load_dataset
from .data.synthetic import generate_synthetic
from .metrics import dumps_report, image_rankings, per_query_tsv, similarity_matrix
from .model import DOWNSAMPLE
from .training import NonFiniteLossError, evaluate, load_checkpoint, train

log = logging.getLogger("geomattn")
SEED_ENV = "GEOMATTN_SEED"


class CLIError(Exception):
    pass


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CLIError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _seed_override(flag: Optional[int]) -> Optional[int]:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise CLIError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return None


# -- commands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    seed = _seed_override(args.seed)
    manifest = generate_synthetic(out, args.ids, args.per_id, 0 if seed is None else seed,
                                  n_test_ids=args.test_ids)
    counts = {s: len(manifest.split(s)) for s in ("train", "query", "gallery")}
    summary = {"images": len(manifest), "identities": args.ids, **counts}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_config(args) -> int:
    cfg = RunConfig(preset=args.preset)
    text = cfg.dumps()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    seed = _seed_override(args.seed)
    if seed is not None:
        changes["seed"] = seed
    if args.preset:
        changes["preset"] = args.preset
    if args.data:
        changes["data_dir"] = args.data
    if args.max_steps is not None:
        changes["max_steps"] = args.max_steps
    cfg = cfg.replace(**changes)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    cfg.save(out / "run.cfg")

    def progress(report):
        if report.step % args.log_every == 0:
            log.info("step %d total %.4f", report.step, report.total)

    try:
        result = train(cfg, out_dir=out, on_step=progress)
    except NonFiniteLossError as exc:
        raise CLIError(str(exc)) from None
    print(dumps_report(result.metrics))
    return 0


def cmd_eval(args) -> int:
    manifest = load_dataset(args.data)
    model = load_checkpoint(args.ckpt)
    report = evaluate(model, manifest)
    if args.per_query:
        q_idx, g_idx = manifest.split("query"), manifest.split("gallery")
        q = model.forward_infer(manifest.load_images(q_idx)).concat
        g = model.forward_infer(manifest.load_images(g_idx)).concat
        rec = manifest.records
        ranks = image_rankings(similarity_matrix(q, g),
                               [rec[i].identity for i in q_idx],
                               np.array([rec[i].identity for i in g_idx]),
                               [rec[i].camera for i in q_idx],
                               np.array([rec[i].camera for i in g_idx]))
        Path(args.per_query).write_text(per_query_tsv(ranks))
    print(dumps_report(report))
    return 0


def _heat(h: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp, [h, w] in [0, 1] to [3, h, w]."""
    return np.stack([np.clip(3 * h, 0, 1), np.clip(3 * h - 1, 0, 1), np.clip(3 * h - 2, 0, 1)])


def cmd_attn(args) -> int:
    model = load_checkpoint(args.ckpt)
    image = pnm.read_chw(args.image)
    c, h, w = image.shape
    if h != w:
        raise CLIError(f"attention export needs a square image, got {h}x{w}")
    if h % DOWNSAMPLE:
        raise CLIError(f"image side must be divisible by {DOWNSAMPLE}, got {h}")
    if c != model.cfg.in_channels:
        if c == 1:
            image = np.repeat(image, model.cfg.in_channels, axis=0)
        else:
            raise CLIError(f"model expects {model.cfg.in_channels} channels, image has {c}")
    Q = model.attention_maps(image[None])[0]
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    top = Q.max()
    scaled = np.round(Q / top * 255).astype(np.uint8) if top > 0 else np.zeros(Q.shape, np.uint8)
    pnm.write(prefix.with_name(prefix.name + ".pgm"), scaled)
    with open(prefix.with_name(prefix.name + ".csv"), "w") as fh:
        for row in Q:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    up = np.kron(Q / top if top > 0 else Q, np.ones((DOWNSAMPLE, DOWNSAMPLE)))
    rgb = image if image.shape[0] == 3 else np.repeat(image[:1], 3, axis=0)
    overlay = 0.5 * rgb + 0.5 * _heat(up)
    pnm.write_chw(prefix.with_name(prefix.name + "_overlay.ppm"), overlay)
    print(json.dumps({"sum": float(Q.sum()), "max": float(top),
                      "argmax": [int(v) for v in np.unravel_index(np.argmax(Q), Q.shape)]}))
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geomattn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic vehicle dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--ids", type=int, required=True)
    g.add_argument("--per-id", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--test-ids", type=int, help="held-out identities (default ids // 5)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("config", help="print a default run config")
    c.add_argument("--preset", default="full", choices=sorted(PRESETS))
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)

    t = sub.add_parser("train", help="train and evaluate on the query/gallery split")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="override data_dir")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--log-every", type=int, default=10)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print retrieval metrics of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--per-query", help="also write a per-query TSV here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attn", help="export the attention map of one image")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--out", required=True, help="output prefix")
    a.set_defaults(func=cmd_attn)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"geomattn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
