"""``anatclip`` command line: gen-data, augment, train, eval, predict.

Exit codes: 0 ok, 2 I/O or usage, 3 data invariant, 4 numerical, 5 checkpoint version.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import AugmentPolicy, ParameterError, perturb_images, sample_policy
from .checkpoint import CheckpointError, VersionError, load_checkpoint
from .config import ConfigError, resolve_config
from .contrastive import NumericalError
from .dataset import (GenerationError, ManifestError, balanced_single_organ_specs, generate_dataset,
                      generate_from_specs, load_manifest, read_png, write_png)
from .labels import LabelError
from .prompts import RenderError
from .training import load_images, train_loop
from .zeroshot import DataError, build_bank, classify, emit_report, evaluate_images, softmax

EXIT_OK, EXIT_IO, EXIT_DATA, EXIT_NUMERIC, EXIT_VERSION = 0, 2, 3, 4, 5

log = logging.getLogger("anatclip")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _writable_dir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {p}: {exc.strerror or exc}") from None
    return p


def _manifest(path: str):
    if not Path(path).is_file():
        raise CliError(EXIT_IO, f"manifest {path} not found")
    return load_manifest(path)


def _model(path: str):
    if not Path(path).is_file():
        raise CliError(EXIT_IO, f"checkpoint {path} not found")
    ckpt = load_checkpoint(path)
    ckpt.check_compatible()
    return ckpt.to_model()


def _digest(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    out = _writable_dir(args.out)
    if args.balanced:
        manifest = generate_from_specs(out, balanced_single_organ_specs(args.balanced, args.seed),
                                       split="test", seed=args.seed, prefix="test")
    else:
        manifest = generate_dataset(out, args.train, args.val, args.test, args.seed)
    for split, c in manifest.counts().items():
        if c["n"]:
            stations = ", ".join(f"{k}={v}" for k, v in c["stations"].items())
            print(f"{split}: {c['n']} images ({stations})")
    print(f"manifest: {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_augment(args) -> int:
    try:
        img = read_png(args.image)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read image {args.image}: {exc}") from None
    out = _writable_dir(args.out)
    specs = sample_policy(np.random.default_rng(args.seed), AugmentPolicy.for_width(img.shape[1]))
    for i, spec in enumerate(specs):
        write_png(out / f"variant_{i:02d}.png", spec.apply(img))
        print(f"variant_{i:02d}.png\t{spec}")
    return EXIT_OK


TRAIN_FLAGS = {
    "mode": "mode", "epochs": "train.epochs", "seed": "train.seed", "batch_size": "train.batch_size",
    "lr": "train.learning_rate", "weight_decay": "train.weight_decay", "lam": "train.lam",
    "duplicate_policy": "train.duplicate_policy",
}


def cmd_train(args) -> int:
    overrides = {key: getattr(args, flag) for flag, key in TRAIN_FLAGS.items()}
    if args.fixed_scale:
        overrides["train.fixed_scale"] = True
    cfg = resolve_config(overrides, args.config)
    manifest = _manifest(args.data)
    out = _writable_dir(args.out)
    result = train_loop(manifest, cfg, out)
    for row in result.rows:
        print(",".join(row.values()))
    print(f"checkpoint: {out / 'model.aclp'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _model(args.ckpt)
    manifest = _manifest(args.data)
    records = manifest.split(args.split)
    if not records:
        raise CliError(EXIT_DATA, f"split {args.split!r} is empty in {args.data}")
    images = load_images(manifest, records)
    ids = [r.image_id for r in records]
    identifiers = {"checkpoint": Path(args.ckpt).name, "checkpoint_sha256": _digest(args.ckpt),
                   "manifest": Path(args.data).name, "split": args.split, "n_images": len(records)}
    if args.perturb_seed is not None:
        images, specs = perturb_images(images, ids, args.perturb_seed)
        identifiers["perturb_seed"] = args.perturb_seed
    report = evaluate_images(model, images, records, ids, identifiers)
    out = _writable_dir(args.report)
    emit_report(report, out)
    if args.perturb_seed is not None:
        (out / "perturbations.csv").write_text(
            "image_id,augment_spec\n" + "".join(f"{i},{s}\n" for i, s in zip(ids, specs)), encoding="utf-8")
    print(f"organ accuracy {report.organ.accuracy:.4f}  macro AUC {report.organ.macro_auc:.4f}")
    print(f"station accuracy {report.station.accuracy:.4f}  macro AUC {report.station.macro_auc:.4f}")
    print(f"report: {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _model(args.ckpt)
    try:
        img = read_png(args.image)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read image {args.image}: {exc}") from None
    emb = model.image_embeddings(img[None].astype(np.float32))[0]
    if args.prompts:
        try:
            prompts = [ln.strip() for ln in Path(args.prompts).read_text(encoding="utf-8").splitlines()
                       if ln.strip()]
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read prompts {args.prompts}: {exc.strerror}") from None
        if not prompts:
            raise CliError(EXIT_DATA, f"{args.prompts} holds no prompts")
        logits = model.text_embeddings(prompts).astype(np.float64) @ emb.astype(np.float64)
        for p, s in zip(prompts, softmax(model.scale * logits)):
            print(f"{s:.6f}\t{p}")
        return EXIT_OK
    for kind in ("organ", "station"):
        pred = classify(emb, build_bank(model, kind), model.scale, Path(args.image).stem)
        print(f"{kind}: {pred.top_label} ({pred.scores[pred.top_index]:.6f})")
        if args.all:
            for lab, s in zip(pred.labels, pred.scores):
                print(f"  {s:.6f}\t{lab}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anatclip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset and its manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=500)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--balanced", type=int, metavar="N",
                   help="instead write N single-organ test scenes cycling through all organs")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("augment", help="write the 10 augmented variants of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="contrastive training with per-epoch checkpoints")
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--mode", choices=("M", "MS", "MSA"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--duplicate-policy", choices=("mask", "allow"))
    p.add_argument("--fixed-scale", action="store_true", help="freeze the logit scale")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot organ and station evaluation report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--report", required=True)
    p.add_argument("--perturb-seed", type=int,
                   help="evaluate on a shifted copy (rotation, gamma, translation) drawn with this seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="zero-shot prediction for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompts", help="file with one caption per line; scores are a softmax over them")
    p.add_argument("--all", action="store_true", help="print every label score")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except VersionError as exc:
        code, msg = EXIT_VERSION, str(exc)
    except CheckpointError as exc:
        code, msg = EXIT_IO, f"unreadable checkpoint: {exc}"
    except NumericalError as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except (ManifestError, LabelError, RenderError, DataError, GenerationError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except (ConfigError, ParameterError) as exc:
        code, msg = EXIT_IO, str(exc)
    except OSError as exc:
        code, msg = EXIT_IO, f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": ")
    print(f"anatclip: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
