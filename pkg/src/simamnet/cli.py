"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 I/O error, 3 config error,
4 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config
from .datapipe import DataError, Label, apply_transform, load_manifest, \
    sample_transform, split, synth_generate, write_manifest, write_pgm
from .features import write_feature_csv
from .harness import FEATURE_KINDS, TrainingError, benchmark_grid, evaluate, \
    export_curves, pair_features, train
from .resnet import build_model, load_checkpoint, save_checkpoint
from .rng import derive_rng
from .verify import SOFT_BUDGET_S, run_checks

EXIT_OK, EXIT_VERIFY, EXIT_IO, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _out(msg: str = "") -> None:
    print(msg, flush=True)


def _load_cfg(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).is_file():
        raise CliError(EXIT_IO, f"config file {path} not found")
    return load_config(path)


def _dataset(cfg: RunConfig):
    d = cfg.data
    if d.manifest is None:
        pairs = synth_generate(d.synth_n, cfg.seed, d.synth_size)
    else:
        pairs = load_manifest(d.manifest, keep_rgb=d.keep_rgb)
    return split(pairs, d.val_fraction, cfg.seed)


def _out_dir(cfg: RunConfig, override) -> Path:
    out = Path(override or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_report(rep) -> None:
    names = [lab.token for lab in Label]
    _out(f"accuracy  {rep.accuracy:.4f}")
    _out(f"macro_f1  {rep.macro_f1:.4f}")
    _out("class      precision  recall  f1")
    for i, n in enumerate(names):
        _out(f"{n:<10} {rep.precision[i]:9.4f}  {rep.recall[i]:6.4f}  {rep.f1[i]:.4f}")
    _out("confusion (rows truth, cols prediction): " + json.dumps(rep.confusion.tolist()))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    if not out.parent.is_dir():
        raise CliError(EXIT_IO, f"parent directory of {out} does not exist")
    pairs = synth_generate(args.n, args.seed, args.size)
    manifest = write_manifest(pairs, out)
    counts = Counter(p.label.token for p in pairs)
    _out(f"wrote {len(pairs)} pairs to {manifest}")
    for lab in Label:
        _out(f"  {lab.token:<9} {counts.get(lab.token, 0)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    train_set, val_set = _dataset(cfg)
    out = _out_dir(cfg, args.out)
    model = build_model(cfg.resnet_config(), cfg.seed, dtype=np.dtype(cfg.model.dtype))
    t0 = time.perf_counter()
    model, curves = train(model, train_set, val_set, cfg.train_config())
    elapsed = time.perf_counter() - t0
    save_checkpoint(model, out / "model.ckpt")
    export_curves(curves, out / "curves")
    rep = evaluate(model, val_set)
    _write_json(out / "report.json", {"split": "val", "n_train": len(train_set),
                                      "n_val": len(val_set), "epochs": len(curves),
                                      **rep.to_dict()})
    _out(f"trained {len(curves)} epochs in {elapsed:.1f} s; outputs in {out}")
    _print_report(rep)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args.config)
    if not Path(args.checkpoint).is_file():
        raise CliError(EXIT_IO, f"checkpoint {args.checkpoint} not found")
    try:
        model = load_checkpoint(args.checkpoint)
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"cannot read checkpoint: {exc}") from None
    if args.manifest:
        data, split_name = load_manifest(args.manifest, keep_rgb=cfg.data.keep_rgb), "manifest"
    else:
        data, split_name = _dataset(cfg)[1], "val"
    rep = evaluate(model, data)
    if args.report:
        _write_json(Path(args.report), {"split": split_name, "n": len(data), **rep.to_dict()})
    _print_report(rep)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_cfg(args.config)
    data = _dataset(cfg)
    out = _out_dir(cfg, args.out)
    t0 = time.perf_counter()
    grid = benchmark_grid(cfg.bench.features, cfg.bench.models, data, cfg.bench_config(),
                          log=lambda m: _out(f"[bench] {m}"))
    text = grid.render_text()
    (out / "grid.txt").write_text(text, encoding="utf-8")
    grid.write_csv(out / "grid.csv")
    _out(text)
    _out(f"grid written to {out / 'grid.csv'} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = _load_cfg(args.config)
    train_set, val_set = _dataset(cfg)
    pairs = train_set + val_set if args.split == "all" else \
        (train_set if args.split == "train" else val_set)
    X = pair_features(args.kind, train_set, pairs, cfg.feature_params())
    write_feature_csv(args.out, X)
    _out(f"wrote {X.shape[0]} x {X.shape[1]} {args.kind} features to {args.out}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    cfg = _load_cfg(args.config)
    policy = cfg.augment_policy()
    if policy is None:
        raise CliError(EXIT_CONFIG, "augment.enabled is false; nothing to preview")
    train_set, _ = _dataset(cfg)
    out = Path(args.out)
    if not out.parent.is_dir():
        raise CliError(EXIT_IO, f"parent directory of {out} does not exist")
    out.mkdir(exist_ok=True)
    pair = train_set[args.index % len(train_set)]
    write_pgm(out / "original_before.pgm", pair.before)
    write_pgm(out / "original_after.pgm", pair.after)
    for i in range(args.count):
        rng = derive_rng(policy.seed, "augment-preview", i)
        t = sample_transform(policy, rng)
        aug = apply_transform(pair, t)
        write_pgm(out / f"aug{i:02d}_before.pgm", aug.before)
        write_pgm(out / f"aug{i:02d}_after.pgm", aug.after)
        _out(f"aug{i:02d}: hflip={t.hflip} vflip={t.vflip} angle={t.angle:g} "
             f"brightness={t.brightness:.3f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    t0 = time.perf_counter()

    def show(r):
        _out(f"{'ok  ' if r.ok else 'FAIL'}  {r.name:<28} {r.detail}  ({r.seconds:.1f} s)")

    results = run_checks(args.inject_fault, show)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.ok]
    if elapsed > SOFT_BUDGET_S:
        _out(f"warning: verify took {elapsed:.0f} s (budget {SOFT_BUDGET_S:.0f} s)")
    if failed:
        _out(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_VERIFY
    _out(f"all {len(results)} checks passed in {elapsed:.1f} s")
    return EXIT_OK


def cmd_config_dump(args) -> int:
    sys.stdout.write(dump_config(_load_cfg(args.config)))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="simamnet",
        description="Paired-radiograph classification with a SimAM ResNet built from scratch.",
        epilog="exit codes: 0 ok, 1 verification failure, 2 I/O error, 3 config error, "
               "4 data error")
    p.add_argument("--threads", type=int, default=None, metavar="N",
                   help="cap BLAS worker threads (results do not depend on it)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def with_config(sp, required=False):
        sp.add_argument("--config", "-c", required=required, metavar="PATH",
                        help="YAML run config (defaults apply to missing keys)")

    sp = sub.add_parser("synth", help="generate synthetic pairs + manifest")
    sp.add_argument("--n", type=int, required=True, help="number of pairs (>= 3)")
    sp.add_argument("--seed", type=int, default=0, help="root seed")
    sp.add_argument("--size", type=int, default=64, help="image extent in pixels")
    sp.add_argument("--out", required=True, metavar="DIR", help="output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a network; writes checkpoint, curves, report")
    with_config(sp, required=True)
    sp.add_argument("--out", metavar="DIR", help="override output.dir")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True, metavar="PATH", help="model.ckpt file")
    sp.add_argument("--manifest", metavar="PATH",
                    help="evaluate every pair of this manifest instead of the val split")
    sp.add_argument("--report", metavar="PATH", help="also write the report as JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="model x feature macro-F1 grid")
    with_config(sp, required=True)
    sp.add_argument("--out", metavar="DIR", help="override output.dir")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("features", help="export pair feature vectors as CSV")
    with_config(sp)
    sp.add_argument("--kind", required=True, choices=FEATURE_KINDS, help="feature kind")
    sp.add_argument("--split", choices=("train", "val", "all"), default="all",
                    help="which pairs to export (fitted parts always use train)")
    sp.add_argument("--out", required=True, metavar="CSV", help="output CSV path")
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("augment-preview", help="write augmented copies of one pair as PGM")
    with_config(sp)
    sp.add_argument("--index", type=int, default=0, help="training pair index")
    sp.add_argument("--count", type=int, default=8, help="number of augmented copies")
    sp.add_argument("--out", required=True, metavar="DIR", help="output directory")
    sp.set_defaults(func=cmd_augment_preview)

    sp = sub.add_parser("verify", help="run the embedded invariant checks")
    sp.add_argument("--inject-fault", choices=("simam-lambda0",), default=None,
                    help="deliberately break one check to exercise failure reporting")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("config", help="config utilities")
    csub = sp.add_subparsers(dest="config_command", required=True, metavar="ACTION")
    dp = csub.add_parser("dump", help="print the canonical form of a config")
    with_config(dp)
    dp.set_defaults(func=cmd_config_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise CliError(EXIT_CONFIG, "--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TrainingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
