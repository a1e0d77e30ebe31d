"""Command-line entry point: gen-data, pretrain, probe, ablate, selftest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes only under ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from afsrl import selftest
from afsrl.errors import (
    CheckpointError,
    CorpusError,
    DegenerateEmbeddingError,
    EmptyGraphError,
    NumericalError,
    ParseError,
    TooFewPointsError,
)
from afsrl.evaluation import (
    accuracy_from_predictions,
    class_mean_accuracy,
    confusion_matrix,
    fit_linear_probe,
    segmentation_probe,
)
from afsrl.experiments import ARMS, DEFAULT_EPSILONS, ablation_cells, cell_config, median_by, run_ablation
from afsrl.pointcloud import (
    MANIFEST_FILE,
    SHAPES,
    SPLIT_FILE,
    build_corpus,
    format_xyz,
    load_corpus,
    materialize,
    write_manifest,
    write_split_meta,
)
from afsrl.trainer import TrainConfig, embed_dataset, load_checkpoint, new_state, parse_kv, save_checkpoint, train

log = logging.getLogger("afsrl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# flag name -> TrainConfig field; config files may use either spelling
FLAG_FIELDS = {
    "tau": "tau",
    "epsilon": "epsilon",
    "alpha": "alpha",
    "beta": "beta",
    "k": "k_neighbors",
    "ratio": "sample_ratio",
    "batch": "batch_size",
    "lr": "learning_rate",
    "epochs": "epochs",
    "seed": "seed",
    "pooling": "pooling",
    "optimizer": "optimizer",
    "fa_view": "fa_view",
    "encoder_dims": "encoder_dims",
    "head_dims": "head_dims",
}

RUN_MANIFEST = "run_manifest.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (flags override --config, which overrides defaults)")
    g.add_argument("--config", type=Path, help="flat key=value file")
    g.add_argument("--tau", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--k", type=int)
    g.add_argument("--ratio", type=float)
    g.add_argument("--batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--pooling", choices=("mean", "max"))
    g.add_argument("--optimizer", choices=("adam", "sgd"))
    g.add_argument("--fa-view", dest="fa_view", choices=("u", "alternate"))
    g.add_argument("--encoder-dims", dest="encoder_dims", type=_csv_ints)
    g.add_argument("--head-dims", dest="head_dims", type=_csv_ints)


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    values: dict = {}
    if getattr(args, "config", None) is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}")
        try:
            for key, raw in parse_kv(text).items():
                key = key.replace("-", "_")
                field = FLAG_FIELDS.get(key, key)
                if field not in {f.name for f in dataclasses.fields(TrainConfig)}:
                    raise UsageError(f"{args.config}: unknown config key {key!r}")
                values[field] = raw
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}")
    for flag, field in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field] = v
    try:
        return TrainConfig.from_mapping(values)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid configuration: {exc}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_manifest(out: Path, cfg: TrainConfig, ds, command: str, extra: dict | None = None) -> None:
    lines = [
        f"command={command}",
        f"started_at={datetime.now(timezone.utc).isoformat(timespec='seconds')}",
        f"dataset_fingerprint={ds.fingerprint()}",
        f"n_clouds={len(ds)}",
        f"n_train={len(ds.train_idx)}",
        f"n_test={len(ds.test_idx)}",
    ]
    lines += [f"{k}={v}" for k, v in (extra or {}).items()]
    (out / RUN_MANIFEST).write_text("\n".join(lines) + "\n" + cfg.to_text())


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --- commands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    unknown = [c for c in classes if c not in SHAPES]
    if unknown or len(classes) < 1:
        raise UsageError(f"unknown classes {unknown}; choose from {', '.join(SHAPES)}")
    if args.per_class < 1 or args.points < 16 or args.noise < 0 or not 0 < args.test_fraction < 1:
        raise UsageError("need --per-class >= 1, --points >= 16, --noise >= 0, 0 < --test-fraction < 1")
    out = _out_dir(args)
    rows = build_corpus(classes, args.per_class, args.points, args.noise, args.seed)
    write_manifest(rows, classes, out / MANIFEST_FILE)
    write_split_meta(out / SPLIT_FILE, args.test_fraction, args.seed)
    ds = materialize(rows, classes, args.test_fraction, args.seed)
    counters = {c: 0 for c in classes}
    for cloud in ds.clouds:
        name = classes[cloud.label]
        d = out / "clouds" / name
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{counters[name]:04d}.xyz").write_text(format_xyz(cloud))
        counters[name] += 1
    (out / "corpus.txt").write_text(
        f"fingerprint={ds.fingerprint()}\nn_clouds={len(ds)}\nn_train={len(ds.train_idx)}\nn_test={len(ds.test_idx)}\n"
    )
    print(f"wrote {len(ds)} clouds ({len(ds.train_idx)} train / {len(ds.test_idx)} test) to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    if args.resume:
        try:
            state, cfg = load_checkpoint(out)
        except FileNotFoundError as exc:
            raise CheckpointError(f"nothing to resume in {out}: {exc}")
        if args.epochs is not None:
            cfg = dataclasses.replace(cfg, epochs=args.epochs)
        ds = load_corpus(args.data)
    else:
        cfg = resolve_config(args)
        ds = load_corpus(args.data)
        state = None
        write_run_manifest(out, cfg, ds, "pretrain", {
            "data": args.data, "checkpoint": out / "model.afsr", "metrics": out / "metrics.csv",
        })
    clouds = ds.subset(ds.train_idx)
    if not clouds:
        raise CorpusError("training split is empty")
    state = train(clouds, cfg, out_dir=out, state=state)
    if state.epoch == 0:
        save_checkpoint(state, cfg, out)
    last = state.loss_history[-1] if state.loss_history else None
    if last:
        print(f"epoch {last[0]}: L_DA {last[1]:.4f}  L_FA {last[2]:.4f}  L {last[3]:.4f}")
    print(f"checkpoint written to {out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    if args.checkpoint is None and not args.untrained:
        raise UsageError("probe needs --checkpoint DIR or --untrained")
    out = _out_dir(args)
    ds = load_corpus(args.data)
    if args.untrained:
        cfg = resolve_config(args)
        params = new_state(cfg).params  # same initialization a pretrain run with this seed starts from
        source = "untrained"
    else:
        try:
            state, cfg = load_checkpoint(args.checkpoint)
        except FileNotFoundError as exc:
            raise CheckpointError(f"missing checkpoint: {exc}")
        params, source = state.params, str(args.checkpoint)
    seed = cfg.seed if args.seed is None else args.seed
    emb, labels = embed_dataset(ds.clouds, params, cfg, seed=seed)
    tr, te = ds.train_idx, ds.test_idx
    model = fit_linear_probe(emb[tr], labels[tr], args.lam, args.probe_epochs, seed)
    pred_tr, pred_te = model.predict(emb[tr]), model.predict(emb[te])
    rows = [
        ("accuracy", "train", accuracy_from_predictions(pred_tr, labels[tr])),
        ("class_mean_accuracy", "train", class_mean_accuracy(pred_tr, labels[tr])),
        ("accuracy", "test", accuracy_from_predictions(pred_te, labels[te])),
        ("class_mean_accuracy", "test", class_mean_accuracy(pred_te, labels[te])),
    ]
    if args.segmentation:
        seg = segmentation_probe(ds.subset(tr), ds.subset(te), params, cfg.k_neighbors, args.lam,
                                 args.probe_epochs, seed)
        rows.append(("miou", "test", seg.miou))
    _write_rows(out / "probe_metrics.csv", ["metric", "split", "value"], [(m, s, repr(float(v))) for m, s, v in rows])
    if args.confusion:
        cm = confusion_matrix(pred_te, labels[te], len(ds.class_names))
        _write_rows(out / "confusion_test.csv", ["true"] + ds.class_names,
                    [[name, *map(int, row)] for name, row in zip(ds.class_names, cm)])
    for m, s, v in rows:
        print(f"{m:<20} {s:<5} {v:.4f}")
    log.info("probed %s on %s", source, args.data)
    return EXIT_OK


def cmd_ablate(args) -> int:
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    if not arms or any(a not in ARMS for a in arms):
        raise UsageError(f"--arms must be drawn from {', '.join(ARMS)}")
    if any(e < 0 for e in args.epsilons):
        raise UsageError("epsilons must be >= 0")
    out = _out_dir(args)
    base = resolve_config(args)
    ds = load_corpus(args.data)
    cells = ablation_cells(args.epsilons if "fused" in arms else (), args.seeds, arms, args.arm_epsilon)
    write_run_manifest(out, base, ds, "ablate", {
        "data": args.data, "epsilons": ",".join(map(repr, args.epsilons)),
        "seeds": ",".join(map(str, args.seeds)), "arms": ",".join(arms), "cells": len(cells),
    })
    results = run_ablation(ds, base, cells, args.workers, args.lam, args.probe_epochs)
    rows = []
    for c, r in zip(cells, results):
        cfg = cell_config(base, c)
        rows.append([c.arm, cfg.alpha, cfg.beta, repr(c.epsilon), c.seed, repr(r.train_accuracy),
                     repr(r.test_accuracy), repr(r.test_class_mean_accuracy), r.status, r.steps])
    _write_rows(out / "ablation.csv", ["arm", "alpha", "beta", "epsilon", "seed", "train_accuracy", "test_accuracy",
                                       "test_class_mean_accuracy", "status", "steps"], rows)
    medians = median_by(cells, results, lambda c: (c.arm, c.epsilon))
    _write_rows(out / "ablation_summary.csv", ["arm", "epsilon", "median_test_accuracy", "n_seeds"],
                [[a, repr(e), repr(m), len(args.seeds)] for (a, e), m in medians.items()])
    for (a, e), m in medians.items():
        print(f"{a:<8} eps={e:<5g} median test accuracy {m:.4f}")
    collapsed = sum(r.status != "ok" for r in results)
    if collapsed:
        print(f"{collapsed} cell(s) stopped early on embedding collapse; see the status column")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest.run_all(seed=args.seed, quick=args.quick)
    lines = [r.line() for r in results]
    ok = all(r.passed for r in results)
    lines.append("ALL PASS" if ok else "FAILED: " + ", ".join(r.name for r in results if not r.passed))
    print("\n".join(lines))
    if args.out is not None:
        (_out_dir(args) / "selftest.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="afsrl", description="Self-supervised point-cloud representation learning with "
                "graph data augmentation and encoder-weight perturbation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic shape corpus")
    g.add_argument("--classes", default=",".join(SHAPES))
    g.add_argument("--per-class", dest="per_class", type=int, default=50)
    g.add_argument("--points", type=int, default=256)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.25)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="self-supervised pretraining")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    _train_flags(t)
    t.set_defaults(func=cmd_pretrain)

    pr = sub.add_parser("probe", help="linear probe on frozen embeddings")
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--checkpoint", type=Path, help="directory written by pretrain")
    pr.add_argument("--untrained", action="store_true", help="probe a freshly initialized encoder")
    pr.add_argument("--lam", type=float, default=1e-3)
    pr.add_argument("--probe-epochs", dest="probe_epochs", type=int, default=500)
    pr.add_argument("--segmentation", action="store_true", help="also report part-segmentation mIoU")
    pr.add_argument("--confusion", action="store_true", help="write the test confusion matrix")
    _train_flags(pr)
    pr.set_defaults(func=cmd_probe)

    a = sub.add_parser("ablate", help="epsilon sweep and single-branch arms")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--epsilons", type=_csv_floats, default=DEFAULT_EPSILONS)
    a.add_argument("--seeds", type=_csv_ints, default=(0, 1, 2))
    a.add_argument("--arms", default="fused,da_only,fa_only")
    a.add_argument("--arm-epsilon", dest="arm_epsilon", type=float, default=1.0,
                   help="epsilon used by the single-branch arms")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--lam", type=float, default=1e-3)
    a.add_argument("--probe-epochs", dest="probe_epochs", type=int, default=500)
    _train_flags(a)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("selftest", help="gradient, oracle, kNN and invariance suites")
    s.add_argument("--quick", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"afsrl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"afsrl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, DegenerateEmbeddingError) as exc:
        print(f"afsrl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ParseError, CorpusError, CheckpointError, TooFewPointsError, EmptyGraphError,
            FileNotFoundError, ValueError) as exc:
        print(f"afsrl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
