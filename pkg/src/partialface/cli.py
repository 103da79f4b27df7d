"""``partialface`` command line: one binary, one subcommand per task.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import generate_toy_dataset, load_image, read_dataset, write_dataset
from .evaluate import directory_loader, evaluate, parse_threshold
from .losses import total_loss
from .model import PartialFaceModel, generic_point, to_input
from .protocol import (ANCHORS, PLACEMENTS, PROTOCOLS, build_manifest, read_landmarks, read_manifest,
                       read_pairs, write_manifest)
from .tensor import grad_check
from .train import TrainingDiverged, train

log = logging.getLogger("partialface")

EMBED_HEADER = "# partialface-embeddings v1"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _anchors(text: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [n for n in names if n not in ANCHORS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"anchors must be among {', '.join(ANCHORS)}, got {text!r}")
    return names


def _threshold(text: str) -> str:
    try:
        parse_threshold(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None
    return text


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, seed=args.seed),
                      pretrain=replace(cfg.pretrain, seed=args.seed),
                      finetune=replace(cfg.finetune, seed=args.seed),
                      data=replace(cfg.data, seed=args.seed))
    return cfg


# -- commands -----------------------------------------------------------------
def cmd_gen_toy(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    if out.exists() and not out.is_dir():
        raise NotADirectoryError(f"output path exists and is not a directory: {out}")
    ds = generate_toy_dataset(cfg.data)
    write_dataset(ds, out, n_pairs=args.pairs)
    print(f"wrote {len(ds)} images of {ds.num_classes} identities to {out}")
    return EXIT_OK


def cmd_gen_protocol(args) -> int:
    pairs = read_pairs(args.pairs, fmt=args.pairs_format)
    landmarks = read_landmarks(args.landmarks)
    missing = sorted({p for pr in pairs for p in (pr.path_a, pr.path_b)} - set(landmarks))
    if missing:
        raise FileNotFoundError(f"{args.landmarks}: no landmarks for " + ", ".join(missing[:10])
                                + (f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""))
    manifest = build_manifest(pairs, args.protocol, args.anchors, args.areas, args.placement)
    write_manifest(manifest, args.out)
    print(f"wrote {len(manifest)} rows ({len(pairs)} pairs) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.stage == "finetune" and args.init is None:
        raise UsageError("--stage finetune requires --init CHECKPOINT")
    cfg = _config(args)
    data = read_dataset(args.data_dir, cfg.backbone.input_size)
    data = data.subset("train") if "train" in set(data.split) else data
    if args.init is not None:
        model = PartialFaceModel.load(args.init)
    else:
        model = PartialFaceModel.build(cfg.model_config(data.num_classes), cfg.model.seed)
        if cfg.model.calibrate_images > 0:
            n = min(cfg.model.calibrate_images, len(data))
            pick = np.random.default_rng(cfg.model.seed).choice(len(data), n, replace=False)
            model.calibrate(to_input(data.images[pick]))
    if data.num_classes > model.config.num_classes:
        raise ValueError(f"dataset has {data.num_classes} labels but the model classifies "
                         f"{model.config.num_classes}")
    tcfg = replace(cfg.train_config(args.stage), stage=args.stage)
    if args.max_steps is not None:
        tcfg = replace(tcfg, max_steps=args.max_steps)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    trace = Path(args.trace) if args.trace else Path(str(args.out_checkpoint) + ".trace.csv")
    rows = train(model, data, tcfg, cfg.loss, trace)
    model.save(args.out_checkpoint)
    last = rows[-1]["total"] if rows else float("nan")
    print(f"trained {len(rows)} steps (now at step {model.step}), final loss {last:.4f}; "
          f"checkpoint {args.out_checkpoint}, trace {trace}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = PartialFaceModel.load(args.checkpoint)
    manifest = read_manifest(args.manifest)
    root = Path(args.images_root) if args.images_root else Path(args.manifest).parent
    lm_path = Path(args.landmarks) if args.landmarks else root / "landmarks.tsv"
    landmarks = read_landmarks(lm_path) if lm_path.is_file() else None
    if args.landmarks and landmarks is None:
        raise FileNotFoundError(f"landmark file not found: {lm_path}")
    report = evaluate(model, manifest, directory_loader(root), landmarks,
                      threshold=args.threshold, folds=args.folds)
    report.write_csv(args.out_report)
    if args.plot_data:
        report.write_plot_data(args.plot_data)
    print(f"{manifest.protocol or 'manifest'}: mean accuracy {report.mean_accuracy():.4f} "
          f"over {len(report.areas(report.protocols()[0]))} areas; report {args.out_report}")
    return EXIT_OK


def cmd_embed(args) -> int:
    model = PartialFaceModel.load(args.checkpoint)
    size = model.config.backbone.input_size
    images = np.stack([load_image(p, size) for p in args.images])
    emb = model.embed(to_input(images))
    with open(args.out_tsv, "w", encoding="utf-8") as fh:
        fh.write(f"{EMBED_HEADER} dim={emb.shape[1]}\n")
        for path, row in zip(args.images, emb):
            fh.write(path + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {len(args.images)} embeddings of dimension {emb.shape[1]} to {args.out_tsv}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    mcfg = replace(cfg.model_config(), keep_prob=1.0)
    model = PartialFaceModel.build(mcfg, cfg.model.seed)
    rng = np.random.default_rng([cfg.model.seed, 7])
    S = cfg.backbone.input_size
    images = rng.uniform(-1.0, 1.0, size=(args.batch, S, S, 3))
    labels = rng.integers(0, mcfg.num_classes, size=args.batch)
    generic_point(model, rng)
    entries = {name: rng.choice(p.data.size, size=min(args.entries, p.data.size), replace=False)
               for name, p in model.params.items()}
    report = grad_check(lambda: total_loss((images, labels), model, cfg.loss, stage=args.stage,
                                           train=False).total,
                        model.params, tol=args.tol, entries=entries)
    for name in sorted(report.per_param, key=report.per_param.get, reverse=True)[:args.show]:
        log.info("%-28s max rel err %.3e", name, report.per_param[name])
    verdict = "PASS" if report.passed(args.tol) else "FAIL"
    print(f"gradcheck {verdict}: {report.checked} entries over {len(report.per_param)} tensors, "
          f"max relative error {report.max_rel_error:.3e} at {report.worst} "
          f"(tol {args.tol:g}); {report.resolved} entries well above rounding noise agree to "
          f"{report.resolved_max_rel_error:.3e} undiscounted")
    return EXIT_OK if report.passed(args.tol) else EXIT_RUNTIME


# -- parser -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="partialface", description="Attentional partial-face verification toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", metavar="FILE",
                        help="run configuration (section.key=value lines); defaults to the toy presets")
        if seed:
            sp.add_argument("--seed", type=int, help="override every seed in the configuration")

    g = sub.add_parser("gen-toy", help="write the procedural toy dataset",
                       description="Render the toy identity dataset: images/, labels.tsv, "
                                   "landmarks.tsv and a pairs.tsv drawn from the test split.")
    g.add_argument("out_dir", help="output directory (created if missing)")
    g.add_argument("--pairs", type=int, default=300, help="number of verification pairs (default 300)")
    common(g)
    g.set_defaults(func=cmd_gen_toy)

    g = sub.add_parser("gen-protocol", help="expand verification pairs into a partial-face manifest",
                       description="Build a benchmark manifest with one row per pair, area and anchor "
                                   "combination.")
    g.add_argument("pairs", help="pairs file (LFW pairs.txt or pathA<TAB>pathB<TAB>label)")
    g.add_argument("landmarks", help="landmark file (path, left eye, nose, mouth x/y)")
    g.add_argument("out", help="output manifest TSV")
    g.add_argument("--protocol", choices=PROTOCOLS, default="partial-cross", help="default partial-cross")
    g.add_argument("--placement", choices=PLACEMENTS, default="centered", help="default centered")
    g.add_argument("--anchors", type=_anchors, default=["left_eye", "nose", "mouth"],
                   help="comma-separated anchors (default left_eye,nose,mouth)")
    g.add_argument("--areas", type=_floats, default=None,
                   help="comma-separated non-occluded areas in percent (default: the nine protocol areas)")
    g.add_argument("--pairs-format", choices=("auto", "lfw", "tsv"), default="auto",
                   help="pairs file format (default auto)")
    g.set_defaults(func=cmd_gen_protocol)

    g = sub.add_parser("train", help="run one training stage",
                       description="Pretrain on holistic faces or finetune with occlusion augmentation. "
                                   "Appends to the loss trace, continuing step numbers of --init.")
    g.add_argument("data_dir", help="dataset directory written by gen-toy (labels.tsv + images)")
    g.add_argument("out_checkpoint", help="checkpoint file to write (.npz)")
    g.add_argument("--stage", choices=("pretrain", "finetune"), required=True, help="training stage")
    g.add_argument("--init", metavar="CHECKPOINT", help="start from this checkpoint (required for finetune)")
    g.add_argument("--trace", metavar="CSV", help="loss trace file (default OUT_CHECKPOINT.trace.csv)")
    g.add_argument("--max-steps", type=int, help="stop after this many steps")
    g.add_argument("--epochs", type=int, help="override the stage's epoch count")
    common(g)
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="verify a manifest and write the accuracy report",
                       description="Embed every crop of the manifest, threshold cosine distances and "
                                   "write per-area accuracies.")
    g.add_argument("checkpoint", help="model checkpoint (.npz)")
    g.add_argument("manifest", help="manifest TSV from gen-protocol")
    g.add_argument("out_report", help="report CSV to write")
    g.add_argument("--threshold", type=_threshold, default="auto",
                   help="'auto' (cross-validated per cell) or a fixed cosine distance (default auto)")
    g.add_argument("--folds", type=int, default=10, help="cross-validation folds for auto (default 10)")
    g.add_argument("--images-root", help="directory manifest paths are relative to (default: manifest's)")
    g.add_argument("--landmarks", help="landmark file (default IMAGES_ROOT/landmarks.tsv)")
    g.add_argument("--plot-data", metavar="CSV", help="also write area-vs-accuracy curves per anchor pair")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("embed", help="write final features of images",
                       description="Write one tab-separated embedding row per image.")
    g.add_argument("checkpoint", help="model checkpoint (.npz)")
    g.add_argument("images", nargs="+", help="image files")
    g.add_argument("out_tsv", help="output TSV")
    g.set_defaults(func=cmd_embed)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full training loss",
                       description="Compare taped gradients of the total loss with central differences "
                                   "on randomly chosen entries of every parameter tensor.")
    g.add_argument("--tol", type=float, default=1e-4, help="max relative error (default 1e-4)")
    g.add_argument("--entries", type=int, default=3, help="entries probed per tensor (default 3)")
    g.add_argument("--batch", type=int, default=2, help="images in the probe batch (default 2)")
    g.add_argument("--stage", choices=("pretrain", "finetune"), default="finetune",
                   help="loss variant to check (default finetune)")
    g.add_argument("--show", type=int, default=5, help="log the worst N tensors with -v (default 5)")
    common(g)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"partialface: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"partialface: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, ConfigError) as e:
        print(f"partialface: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
