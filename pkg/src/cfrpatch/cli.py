"""Command-line entry point: train, attack, sweep, eval, heatmap.

Exit codes: 0 success, 2 usage or configuration error, 3 data precondition
failed, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attacks, cfr, data as dio, metrics, models, runio

logger = logging.getLogger("cfrpatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_KEYS = {"N": "iterations", "T": "temperature", "tau": "tau"}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def number(text: str) -> float:
    """Parse ``0.1``, ``16/255`` or ``1e-3`` exactly into a float."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from exc


def _grid(text: str) -> tuple:
    if "=" not in text:
        raise argparse.ArgumentTypeError("grid must look like tau=0,0.2,0.4")
    key, values = text.split("=", 1)
    if key not in SWEEP_KEYS:
        raise argparse.ArgumentTypeError(f"grid parameter must be one of {sorted(SWEEP_KEYS)}")
    vals = [number(v) for v in values.split(",") if v.strip()]
    return key, vals


# -- data ----------------------------------------------------------------------

def _add_data_args(p: argparse.ArgumentParser, n_default: int, seed_default: int) -> None:
    p.add_argument("--data", default="synth", choices=["synth", "cifar10", "png"],
                   help="dataset source (default: synth)")
    p.add_argument("--data-path", help="CIFAR-10 .bin file(s) separated by commas, or a PNG root; "
                   "defaults to $CFR_DATA_DIR/cifar-10-batches-bin/test_batch.bin for cifar10")
    p.add_argument("--cifar-classes", help="keep and relabel these CIFAR-10 classes, e.g. 0,5")
    p.add_argument("--class-names", help="PNG class folder names, comma separated")
    p.add_argument("--n", type=int, default=n_default, help=f"image count (default: {n_default})")
    p.add_argument("--data-seed", type=int, default=seed_default,
                   help=f"synthetic dataset seed (default: {seed_default})")
    p.add_argument("--classes", type=int, default=2, help="synthetic class count (default: 2)")


def load_data(args, limit=None) -> dio.LabeledDataset:
    if args.data == "synth":
        return dio.synth_shapes(args.n, seed=args.data_seed, classes=args.classes)
    if args.data == "cifar10":
        if args.data_path:
            paths = args.data_path.split(",")
        else:
            paths = [dio.data_dir() / "cifar-10-batches-bin" / "test_batch.bin"]
        classes = [int(c) for c in args.cifar_classes.split(",")] if args.cifar_classes else None
        return dio.load_cifar10(paths, classes, limit, relabel=classes is not None)
    if not args.data_path or not args.class_names:
        raise CliError("--data png needs --data-path and --class-names")
    return dio.load_png_dir(args.data_path, args.class_names.split(","))


def correctly_classified(model: models.Model, dataset: dio.LabeledDataset, n: int) -> dio.LabeledDataset:
    """First ``n`` images the model gets right; exit 3 when there are none."""
    if not len(dataset):
        raise CliError("dataset is empty", EXIT_DATA)
    x, y = dataset.arrays()
    if x.shape[1:] != model.spec.input_shape:
        raise CliError(f"images are {x.shape[1:]}, model expects {model.spec.input_shape}")
    keep = np.flatnonzero(models.predict(model, x) == y)[:n]
    if not keep.size:
        raise CliError("model classifies none of the images correctly", EXIT_DATA)
    return dataset.subset(keep)


def _load_model(path) -> models.Model:
    return runio.load_checkpoint(path)


# -- attack configuration ------------------------------------------------------

def _add_attack_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("CFR attack")
    g.add_argument("--iterations", "-N", type=int, default=20, help="iterations N (default: 20)")
    g.add_argument("--eta", type=number, default=None,
                   help="step size; default 10 for inputs up to 32x32, 20 above")
    g.add_argument("--temperature", "-T", type=number, default=0.1, help="inverse temperature T (default: 0.1)")
    g.add_argument("--beta", type=number, default=1.0, help="distortion weight beta (default: 1)")
    g.add_argument("--tau", type=number, default=0.2, help="CFR threshold tau (default: 0.2)")
    g.add_argument("--early-stop", action="store_true", help="stop at the first misclassification")
    b = p.add_argument_group("FGSM / PGD")
    b.add_argument("--eps", type=number, default=Fraction(16, 255), help="l_inf bound (default: 16/255)")
    b.add_argument("--alpha", type=number, default=Fraction(2, 255), help="PGD step (default: 2/255)")
    b.add_argument("--steps", type=int, default=20, help="PGD steps (default: 20)")
    b.add_argument("--random-start", action="store_true", help="PGD uniform start inside the ball")


def attack_config(args, method: str):
    if method == "cfr":
        cfg = attacks.AttackConfig(iterations=args.iterations, eta=args.eta,
                                   temperature=float(args.temperature), beta=float(args.beta),
                                   tau=float(args.tau), early_stop=args.early_stop)
    else:
        cfg = attacks.BaselineConfig(eps=float(args.eps), alpha=float(args.alpha),
                                     steps=args.steps, random_start=args.random_start)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if method == "cfr" and args.iterations < 1:
        raise CliError("iterations must be >= 1")
    return cfg


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    d.pop("seed", None)  # per-image seeds derive from --seed
    return d


def _run_attack(model, batch, method, cfg, args) -> list:
    return attacks.attack_batch(model, batch, method, cfg, workers=args.workers, master_seed=args.seed)


def _numeric_failures(results) -> int:
    return sum(r.error is not None for r in results)


# -- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    dataset = load_data(args)
    if not len(dataset):
        raise CliError("training set is empty", EXIT_DATA)
    if args.spec:
        spec = models.ModelSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        spec = models.zoo_spec(args.model, dataset[0].pixels.shape, dataset.class_count)
    spec.validate()
    adv = None
    if args.adv_train == "pgd":
        adv = models.AdversarialMode(steps=args.steps, alpha=float(args.alpha), eps=float(args.eps))
    lr = args.lr if args.lr is not None else models.DEFAULT_LR.get(spec.name, 0.05)
    cfg = models.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=float(lr),
                             momentum=float(args.momentum), weight_decay=float(args.weight_decay),
                             seed=args.seed, adversarial=adv)
    model, history = models.train(models.build(spec, args.seed), dataset, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    runio.save_checkpoint(model, out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    runio.write_csv([asdict(h) for h in history], log_path, ["epoch", "loss", "train_acc", "val_acc"])
    last = history[-1] if history else None
    print(json.dumps({"checkpoint": str(out), "log": str(log_path),
                      "val_acc": None if last is None else last.val_acc}))
    return EXIT_OK


def cmd_attack(args) -> int:
    model = _load_model(args.model)
    cfg = attack_config(args, args.method)
    batch = correctly_classified(model, load_data(args), args.n)
    results = _run_attack(model, batch, args.method, cfg, args)
    config = {"attack": _config_dict(cfg), "model": str(args.model), "data": batch.provenance,
              "seed": args.seed, "n_requested": args.n}
    extra = {"created": datetime.now(timezone.utc).isoformat()}
    report = runio.build_report(results, config, args.method, extra=extra)
    runio.write_run(results, report, args.out, triptychs=args.png)
    print(json.dumps({"out": str(args.out), **report["metrics"]}))
    failed = _numeric_failures(results)
    if failed:
        logger.error("%d of %d images hit a numeric failure", failed, len(results))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.grid or any(not vals for _, vals in args.grid):
        raise CliError("sweep needs at least one non-empty --grid")
    if len(args.grid) > 2:
        raise CliError("sweep takes one or two --grid options")
    model = _load_model(args.model)
    base = attack_config(args, "cfr")
    batch = correctly_classified(model, load_data(args), args.n)
    keys = [k for k, _ in args.grid]
    rows = []
    for point in itertools.product(*(vals for _, vals in args.grid)):
        changes = {SWEEP_KEYS[k]: (int(v) if k == "N" else v) for k, v in zip(keys, point)}
        try:
            cfg = replace(base, **changes)
            cfg.validate()
        except ValueError as exc:
            raise CliError(f"grid point {dict(zip(keys, point))}: {exc}") from exc
        results = _run_attack(model, batch, "cfr", cfg, args)
        rep = metrics.report(results)
        rows.append({**dict(zip(keys, point)), "asr": rep.asr, "l0": rep.l0, "ssim": rep.ssim, "n": rep.n})
        logger.info("%s -> asr %.2f l0 %.1f", dict(zip(keys, point)), rep.asr, rep.l0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    runio.write_csv(rows, out, keys + ["asr", "l0", "ssim", "n"])
    print(json.dumps({"out": str(out), "points": len(rows)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.mode == "importance":
        model = _load_model(args.model)
        batch = correctly_classified(model, load_data(args), args.n)
        res = metrics.cfr_importance_eval(model, batch, float(args.tau))
        out = asdict(res)
    elif args.mode == "transfer":
        target = _load_model(args.target)
        if args.run:
            results = runio.read_results(args.run)
            method = runio.read_run(args.run)["method"]
        else:
            if not args.substitute:
                raise CliError("transfer needs --run or --substitute")
            sub = _load_model(args.substitute)
            if sub.spec.input_shape != target.spec.input_shape or \
                    sub.spec.class_count != target.spec.class_count:
                raise CliError("substitute and target checkpoints take different inputs or classes")
            method = args.method
            batch = correctly_classified(sub, load_data(args), args.n)
            results = _run_attack(sub, batch, method, attack_config(args, method), args)
        if not results:
            raise CliError("no adversarial examples to transfer", EXIT_DATA)
        if results[0].original.shape != target.spec.input_shape:
            raise CliError("run images do not match the target model input shape")
        try:
            out = {"method": method, "transfer_asr": metrics.transfer_eval(results, target)}
        except metrics.ContractError as exc:
            raise CliError(str(exc), EXIT_DATA) from exc
    else:
        results = runio.read_results(args.run)
        recomputed = metrics.report(results).to_dict()
        stored = runio.read_run(args.run)["metrics"]
        out = {"metrics": recomputed, "matches_report": recomputed == stored}
    text = json.dumps(out, indent=2, sort_keys=True)
    if getattr(args, "out", None):
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    model = _load_model(args.model)
    batch = correctly_classified(model, load_data(args), args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for img in batch:
        region = cfr.locate(model, img.pixels, img.label, float(args.tau))
        heat = dio.scale_for_display(region.upsampled)
        heat3 = np.repeat(heat[None], 3, axis=0)
        cut = cfr.zero_outside_cfr(img.pixels, cfr.hard_mask(region.mask))
        dio.write_png(runio.triptych(img.pixels, heat3, cut), out / f"{runio._safe(img.id)}.png")
    print(json.dumps({"out": str(out), "images": len(batch)}))
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfrpatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--model", default="cnn-s", choices=list(models.ZOO))
    p.add_argument("--spec", help="JSON model spec (overrides --model)")
    _add_data_args(p, n_default=1200, seed_default=1)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=number, default=None,
                   help="learning rate (default: 0.05 for cnn-s, 0.02 for cnn-m)")
    p.add_argument("--momentum", type=number, default=0.9)
    p.add_argument("--weight-decay", type=number, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adv-train", choices=["pgd"], help="PGD adversarial training")
    p.add_argument("--eps", type=number, default=Fraction(8, 255), help="AT bound (default: 8/255)")
    p.add_argument("--alpha", type=number, default=Fraction(2, 255), help="AT step (default: 2/255)")
    p.add_argument("--steps", type=int, default=7, help="AT PGD steps (default: 7)")
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--log", help="per-epoch CSV (default: <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    def with_run_args(p, n_default=128):
        p.add_argument("--model", required=True, help="checkpoint path")
        _add_data_args(p, n_default=n_default, seed_default=1000)
        p.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("attack", help="attack correctly classified images")
    p.add_argument("--method", default="cfr", choices=list(attacks.METHODS))
    with_run_args(p)
    _add_attack_args(p)
    p.add_argument("--out", default="run")
    p.add_argument("--png", type=int, default=0, help="write triptychs for the first K images")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="CFR attack over a grid of N, T or tau")
    with_run_args(p)
    _add_attack_args(p)
    p.add_argument("--grid", type=_grid, action="append", help="e.g. tau=0,0.2,0.4,0.6 (repeat for 2-D)")
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="importance, transfer or metrics evaluation")
    modes = p.add_subparsers(dest="mode", required=True)
    q = modes.add_parser("importance", help="accuracy on clean, Adv-CFR and Adv-non-CFR images")
    with_run_args(q)
    q.add_argument("--tau", type=number, default=0.2)
    q.add_argument("--out")
    q = modes.add_parser("transfer", help="ASR of substitute-crafted examples on a target")
    q.add_argument("--target", required=True)
    q.add_argument("--run", help="run directory produced by `attack`")
    q.add_argument("--substitute", help="craft on this checkpoint instead of reading --run")
    q.add_argument("--method", default="cfr", choices=list(attacks.METHODS))
    _add_data_args(q, n_default=128, seed_default=1000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    _add_attack_args(q)
    q.add_argument("--out")
    q = modes.add_parser("metrics", help="recompute metrics from a stored run")
    q.add_argument("--run", required=True)
    q.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="export image | CAM | CFR-only PNGs")
    with_run_args(p, n_default=8)
    p.add_argument("--tau", type=number, default=0.2)
    p.add_argument("--out", default="heatmaps")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (models.ConfigError, models.SpecMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dio.DataError, dio.FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (attacks.NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
