"""``iic`` command line: gen-data, train, extract, retrieve, finetune, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from . import config as cfgfile
from .datasets import SyntheticSpec, generate_dataset, read_manifest
from .encoder import load_params
from .errors import DataError, IICError, NumericError, UsageError
from .retrieval import (
    TOPK,
    VIEW_LABELS,
    extract_features,
    joint_features,
    knn_retrieve,
    load_features,
    report_table,
    save_features,
)
from .trainer import FinetuneConfig, TrainConfig, finetune_classifier, run_training

log = logging.getLogger("iic")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _echo_args(out: Path, args) -> None:
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    (out / f"{args.command}_args.txt").write_text("".join(f"{k} = {v}\n" for k, v in items.items()))


def _checkpoint(path):
    p = Path(path)
    enc = p / "encoder.iicwgt" if p.is_dir() else p
    if not enc.is_file():
        raise DataError(f"no encoder checkpoint at {p}")
    return load_params(enc)


def cmd_gen_data(args) -> int:
    spec = cfgfile.load(SyntheticSpec, args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out)
    if not out.parent.is_dir():
        raise DataError(f"parent of output directory {out} does not exist")
    manifest = generate_dataset(spec, out)
    cfgfile.save(spec, out / "synthetic_spec.txt")
    n_train = len(manifest.split("train"))
    print(f"{len(manifest)} videos written ({n_train} train / {len(manifest) - n_train} test)")
    print(out / "manifest.tsv")
    return 0


def cmd_train(args) -> int:
    config = cfgfile.load(TrainConfig, args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.ablate_intra_neg:
        config = dataclasses.replace(config, intra_neg=False)
    out = _out_dir(args.out)
    _echo_args(out, args)
    train = read_manifest(args.data).split("train")
    result = run_training(train, config, out)
    means = result.epoch_means()
    if means:
        print(f"{len(means)} epochs, {result.state.iteration} iterations, final epoch loss {means[-1]:.4f}")
    else:
        print("0 epochs; checkpoint holds the initial parameters")
    return 0


def cmd_extract(args) -> int:
    params = _checkpoint(args.checkpoint)
    manifest = read_manifest(args.data)
    out = _out_dir(args.out)
    _echo_args(out, args)
    for split in ("train", "test"):
        fs = extract_features(params, manifest.split(split), args.view, args.clips_per_video)
        path = out / f"features_{args.view}_{split}.iicftr"
        save_features(path, fs)
        print(path)
    return 0


def _parse_views(text: str) -> list:
    views = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in views if v not in VIEW_LABELS]
    if not views or bad:
        raise UsageError(f"--views must be a comma list of rgb, res, joint (got {text!r})")
    return views


def cmd_retrieve(args) -> int:
    views = _parse_views(args.views)
    params = _checkpoint(args.checkpoint)
    manifest = read_manifest(args.data)
    out = _out_dir(args.out or (args.checkpoint if Path(args.checkpoint).is_dir() else Path(args.checkpoint).parent))
    _echo_args(out, args)
    needed = {"rgb", "res"} if "joint" in views else set(views)
    files = {}
    for view in sorted(needed):
        for split in ("train", "test"):
            fs = extract_features(params, manifest.split(split), view, args.clips_per_video)
            files[view, split] = out / f"features_{view}_{split}.iicftr"
            save_features(files[view, split], fs)
    reports = {}
    for view in views:
        if view == "joint":
            gallery = joint_features(load_features(files["rgb", "train"]), load_features(files["res", "train"]))
            queries = joint_features(load_features(files["rgb", "test"]), load_features(files["res", "test"]))
        else:
            gallery, queries = load_features(files[view, "train"]), load_features(files[view, "test"])
        if len(queries) == 0:
            raise DataError("manifest has no test split to query with")
        reports[VIEW_LABELS[view]] = knn_retrieve(queries, gallery, TOPK)
    table = report_table(reports)
    (out / "retrieval_report.csv").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_finetune(args) -> int:
    config = cfgfile.load(FinetuneConfig, args.config) if args.config else FinetuneConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    params = _checkpoint(args.checkpoint)
    manifest = read_manifest(args.data)
    out = _out_dir(args.out)
    _echo_args(out, args)
    cfgfile.save(config, out / "finetune_config.txt")
    res = finetune_classifier(params, manifest.split("train"), manifest.split("test"), args.mode, config)
    line = f"{args.mode},{100 * res.train_accuracy:.1f},{100 * res.test_accuracy:.1f}\n"
    (out / "finetune_report.csv").write_text("mode,train_acc,test_acc\n" + line)
    print(f"{args.mode}: train {100 * res.train_accuracy:.1f}%  test {100 * res.test_accuracy:.1f}%")
    if res.unseen_labels:
        print(f"unseen test labels: {res.unseen_labels}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    rows = []
    header = None
    for path in args.inputs:
        try:
            with open(path, newline="") as fh:
                reader = list(csv.reader(fh))
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if not reader:
            raise DataError(f"{path} is empty")
        if header is None:
            header = reader[0]
        elif reader[0] != header:
            raise DataError(f"{path}: columns {reader[0]} differ from {header}")
        run = Path(path).parent.name or str(path)
        rows += [[run] + r for r in reader[1:]]
    text = ",".join(["run"] + header) + "\n" + "".join(",".join(r) + "\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iic", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the synthetic reversal-pair dataset")
    g.add_argument("--spec", help="key=value synthetic spec file (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="self-supervised inter-intra contrastive training")
    t.add_argument("--config", help="key=value train config file (defaults if omitted)")
    t.add_argument("--data", required=True, help="manifest file or dataset directory")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablate-intra-neg", action="store_true", help="two-view training without intra-negatives")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="write per-video features for both splits")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--view", choices=("rgb", "res", "external"), default="rgb")
    e.add_argument("--clips-per-video", type=int, default=4)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("retrieve", help="test-vs-train nearest-neighbour retrieval")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--views", default="rgb,res,joint", help="comma list of rgb, res, joint")
    r.add_argument("--clips-per-video", type=int, default=4)
    r.add_argument("--out", help="output directory (defaults to the checkpoint directory)")
    r.set_defaults(func=cmd_retrieve)

    f = sub.add_parser("finetune", help="supervised fine-tuning with a linear head")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--mode", choices=("view1_rgb", "view2_modality"), default="view2_modality")
    f.add_argument("--config", help="key=value fine-tune config file")
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_finetune)

    rep = sub.add_parser("report", help="merge retrieval_report.csv files into one table")
    rep.add_argument("--inputs", nargs="+", required=True)
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except IICError as exc:
        print(f"iic {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"iic {args.command}: numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except (ValueError, OSError) as exc:
        print(f"iic {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
