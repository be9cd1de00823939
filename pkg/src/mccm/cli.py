"""Command-line entry point: ``mccm {gen,spectrum,train,eval,fuse,compare}``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every command prints
its resolved configuration (seed included) as one JSON line before working.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path

from . import evalkit, freqspec, harness, imgdata, lossfn, net

log = logging.getLogger("mccm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratios must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3 or any(p < 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-6:
        raise argparse.ArgumentTypeError(f"ratios must be three non-negative numbers summing to 1, got {text!r}")
    return parts


def _announce(command: str, **config) -> None:
    print(json.dumps({"command": command, **config}, sort_keys=True, default=str), flush=True)


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _add_net_flags(p: argparse.ArgumentParser) -> None:
    d = net.NetConfig()
    p.add_argument("--input-size", type=int, default=None, help="defaults to the dataset image size")
    p.add_argument("--stem-channels", type=int, default=d.stem_channels)
    p.add_argument("--blocks", type=int, default=d.blocks)
    p.add_argument("--layers-per-block", type=int, default=d.layers_per_block)
    p.add_argument("--growth", type=int, default=d.growth)
    p.add_argument("--dtype", choices=("float64", "float32"), default=d.dtype)
    p.add_argument("--stem-pool", action="store_true", help="2x2 average pool after the stem")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mccm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a toy dataset directory")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--generator", required=True, choices=imgdata.GENERATORS)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ratios", type=_ratios, default=imgdata.DEFAULT_RATIOS)
    p.add_argument("--force", action="store_true", help="replace an existing non-empty output directory")

    p = sub.add_parser("spectrum", help="average high-pass log spectrum of a dataset")
    p.add_argument("--in", dest="indir", required=True, type=Path)
    p.add_argument("--sample", type=int, default=1000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, type=Path, help="PGM display image")
    p.add_argument("--csv", type=Path, help="raw average, one CSV per channel")
    p.add_argument("--no-highpass", action="store_true")

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--pristine", required=True, type=Path)
    p.add_argument("--fake", required=True, type=Path)
    p.add_argument("--variant", required=True, choices=harness.VARIANTS)
    p.add_argument("--protocol", choices=harness.PROTOCOLS, default="I")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--micro-batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--wd", type=float, default=1e-5)
    p.add_argument("--decoupled-wd", action="store_true")
    p.add_argument("--flip-prob", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=3.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--bce-all-heads", action="store_true")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--history", type=Path, help="defaults to <out stem>.history.csv")
    _add_net_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on the test splits")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--pristine", required=True, type=Path)
    p.add_argument("--fake", required=True, type=Path)
    p.add_argument("--aug", action="store_true")
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--scores", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--roc", type=Path, help="also write ROC points as fpr,tpr CSV")

    p = sub.add_parser("fuse", help="average two score files")
    p.add_argument("--scores-a", required=True, type=Path)
    p.add_argument("--scores-b", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("compare", help="run a leave-one-out grid and write the result table")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--jobs", type=int, default=1)
    return parser


# --------------------------------------------------------------------------- commands


def cmd_gen(args) -> None:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if args.size < 16 or args.size % 2:
        raise UsageError("--size must be even and at least 16")
    out: Path = args.out
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to replace it")
    _announce("gen", generator=args.generator, count=args.count, size=args.size, seed=args.seed,
              ratios=list(args.ratios), out=str(out))
    ds = imgdata.build_dataset(args.generator, args.count, args.size, args.seed, args.ratios)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        imgdata.save_dataset(ds, staging)
        if out.exists():
            shutil.rmtree(out)
        staging.rename(out)
    finally:
        if staging.exists():
            shutil.rmtree(staging)
    counts = {s: len(ds.indices(s)) for s in imgdata.SPLITS}
    print(json.dumps({"written": str(out), "splits": counts}))


def cmd_spectrum(args) -> None:
    ds = imgdata.load_dataset(args.indir)
    sample = args.sample
    if sample > len(ds):
        _warn(f"--sample {sample} exceeds dataset size {len(ds)}; using {len(ds)}")
        sample = len(ds)
    _announce("spectrum", indir=str(args.indir), sample=sample, seed=args.seed, highpass=not args.no_highpass,
              out=str(args.out), csv=str(args.csv) if args.csv else None)
    avg, display = freqspec.average_spectrum(ds.pixels, sample, args.seed, highpass=not args.no_highpass)
    freqspec.write_pgm(display, args.out)
    if args.csv:
        freqspec.write_channel_csvs(avg, args.csv)
    print(json.dumps({"nyquist_margin": freqspec.nyquist_margin(avg)}))


def _splits(pristine_dir: Path, fake_dir: Path):
    pristine = imgdata.load_dataset(pristine_dir)
    fake = imgdata.load_dataset(fake_dir)
    return pristine, fake


def cmd_train(args) -> None:
    if args.variant == "fusion":
        raise UsageError("the fusion variant is not trained; train one_rgb and one_dft, then use `mccm fuse`")
    if args.variant == "dual_cmfl" and args.lam == 0:
        _warn("--lambda 0 reduces dual_cmfl to cross entropy on the joint head")
    try:
        loss_cfg = lossfn.LossConfig(args.alpha, args.gamma, args.lam, bce_all_heads=args.bce_all_heads)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    pristine, fake = _splits(args.pristine, args.fake)
    size = args.input_size or pristine.pixels.shape[1]
    try:
        net_cfg = net.NetConfig(size, args.stem_channels, args.blocks, args.layers_per_block, args.growth,
                                dtype=args.dtype, stem_pool=args.stem_pool)
        cfg = harness.ExperimentConfig(
            protocol=args.protocol, train_generator=fake.manifest.records[0].generator,
            model_variant=args.variant, loss_cfg=loss_cfg, net_cfg=net_cfg, epochs=args.epochs,
            batch_size=args.batch, lr=args.lr, wd=args.wd, flip_prob=args.flip_prob, seed=args.seed,
            micro_batch=args.micro_batch, decoupled_wd=args.decoupled_wd)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    history = args.history or args.out.with_name(f"{args.out.stem}.history.csv")
    _announce("train", out=str(args.out), history=str(history), **cfg.to_dict())
    train = imgdata.concat_datasets([pristine.select("train"), fake.select("train")])
    val = imgdata.concat_datasets([pristine.select("val"), fake.select("val")])
    result = harness.train_model(cfg, train, val)
    net.save_checkpoint(result.best_state, args.out)
    imgdata.atomic_write_text(history, result.history_csv())
    print(json.dumps({"best_epoch": result.best_epoch, "best_val_loss": result.best_state.best_value}))


def cmd_eval(args) -> None:
    if args.aug and args.eval_seed is None:
        raise UsageError("--aug needs --eval-seed so every model sees the same augmented images")
    _announce("eval", model=str(args.model), aug=args.aug, seed=args.eval_seed,
              scores=str(args.scores), report=str(args.report))
    state = net.load_checkpoint(args.model)
    pristine, fake = _splits(args.pristine, args.fake)
    test = imgdata.concat_datasets([pristine.select("test"), fake.select("test")])
    images = harness.augmented_images(test, args.eval_seed if args.aug else None)
    digest = harness.inputs_digest(images)
    scores = harness.evaluate_model(state, test, images=images)
    report = evalkit.evaluate(scores, model=args.model.name, aug="with" if args.aug else "none",
                              inputs_sha256=digest)
    evalkit.write_scores(scores, args.scores)
    evalkit.write_report_json(report, args.report)
    if args.roc:
        evalkit.write_roc(report.curve, args.roc)
    print(json.dumps({"auc": report.auc, "d_eer": report.d_eer, "inputs_sha256": digest}))


def cmd_fuse(args) -> None:
    _announce("fuse", scores_a=str(args.scores_a), scores_b=str(args.scores_b), out=str(args.out), seed=None)
    fused = harness.fuse_scoresets(evalkit.read_scores(args.scores_a), evalkit.read_scores(args.scores_b))
    evalkit.write_scores(fused, args.out)


GRID_KEYS = {"datasets", "protocol", "variants", "seeds", "eval_seed", "out_dir", "include_seen", "experiment"}


def load_grid_config(path: Path) -> harness.GridSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read grid config {path}: {exc}") from None
    unknown = set(doc) - GRID_KEYS
    if unknown:
        raise UsageError(f"unknown grid config keys: {sorted(unknown)}")
    for key in ("datasets", "out_dir"):
        if key not in doc:
            raise UsageError(f"grid config lacks {key!r}")
    base_dir = Path(path).parent
    try:
        exp = harness.ExperimentConfig.from_dict({**doc.get("experiment", {}), "protocol": doc.get("protocol", "I")})
        variants = tuple(doc.get("variants", harness.VARIANTS))
        bad = set(variants) - set(harness.VARIANTS)
        if bad:
            raise ValueError(f"unknown variants {sorted(bad)}")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid grid config: {exc}") from None
    datasets = {name: imgdata.load_dataset(base_dir / d) for name, d in doc["datasets"].items()}
    if exp.net_cfg.input_size != datasets["pristine"].pixels.shape[1] and "input_size" not in doc.get(
            "experiment", {}).get("net_cfg", {}):
        exp = replace(exp, net_cfg=replace(exp.net_cfg, input_size=datasets["pristine"].pixels.shape[1]))
    return harness.GridSpec(
        datasets=datasets,
        base=exp,
        variants=variants,
        seeds=tuple(doc.get("seeds", [0])),
        eval_seed=int(doc.get("eval_seed", 0)),
        include_seen=bool(doc.get("include_seen", False)),
        out_dir=base_dir / doc["out_dir"],
    )


def cmd_compare(args) -> None:
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    spec = load_grid_config(args.config)
    _announce("compare", config=str(args.config), out=str(args.out), jobs=args.jobs, seeds=list(spec.seeds),
              variants=list(spec.variants), eval_seed=spec.eval_seed, experiment=spec.base.to_dict())
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    reports = harness.run_leave_one_out(spec, jobs=args.jobs)
    evalkit.write_table(reports, args.out)
    print(json.dumps({"rows": len(reports), "table": str(args.out)}))


COMMANDS = {
    "gen": cmd_gen,
    "spectrum": cmd_spectrum,
    "train": cmd_train,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, net.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
