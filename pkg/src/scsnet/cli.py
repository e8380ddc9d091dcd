"""Command-line pipeline: synthesize, preprocess, train, evaluate, report.

Every command writes its outputs under --out together with a manifest.txt
recording the resolved flags, the seed, and sha256 checksums of all inputs
and outputs; `rerun` replays a manifest into a fresh directory and verifies
that the outputs come back byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import shlex
import sys
from datetime import datetime, timezone
from pathlib import Path

from .datasets import SplitSpec, SubjectDataset, load_trialset, make_splits, save_trialset, \
    synth_multisubject
from .models import load_checkpoint, save_checkpoint
from .preprocessing import preprocess_trialset
from .training import ComparisonRow, TrainConfig, evaluate, negative_transfer_report, train

CONTAINER_SUFFIX = ".tsc"
SEED_ENV = "SCSN_SEED"
SUBJECTS_NOTE = "A01,A03,A07,A08,A09"


# ---------------------------------------------------------------------------
# flag parsing helpers


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} is not a positive integer")
    return value


def _nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"{value} is negative")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"{value} is not positive")
    return value


def _nonnegative_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"{value} is negative")
    return value


def _unit_float(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is outside [0, 1]")
    return value


def _range_pair(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split(":")
        pair = (int(lo), int(hi))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not start:end") from None
    if pair[0] < 0 or pair[0] > pair[1]:
        raise argparse.ArgumentTypeError(f"{text!r} is not an ordered range")
    return pair


def _dims(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(d) for d in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated int list") from None


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    return int(os.environ.get(SEED_ENV, "0"))


# ---------------------------------------------------------------------------
# manifest plumbing


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, args: list[str], seed: int | None,
                   inputs: list[Path], outputs: list[Path],
                   extras: dict[str, str] | None = None) -> Path:
    lines = [
        f"command={command}",
        f"timestamp={datetime.now(timezone.utc).isoformat()}",
        f"args={shlex.join(args)}",
    ]
    if seed is not None:
        lines.append(f"seed={seed}")
    for key, value in (extras or {}).items():
        lines.append(f"{key}={value}")
    for path in inputs:
        lines.append(f"input={path}\t{sha256_file(path)}")
    for path in outputs:
        lines.append(f"output={path.name}\t{sha256_file(path)}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path: Path) -> dict:
    info = {"inputs": [], "outputs": []}
    for line in path.read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        if key == "input":
            name, _, digest = value.partition("\t")
            info["inputs"].append((name, digest))
        elif key == "output":
            name, _, digest = value.partition("\t")
            info["outputs"].append((name, digest))
        else:
            info[key] = value
    return info


def _out_dir(ns) -> Path:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _discover_containers(data_dir: Path) -> list[Path]:
    files = sorted(data_dir.glob(f"*{CONTAINER_SUFFIX}"))
    if not files:
        raise FileNotFoundError(f"no {CONTAINER_SUFFIX} containers under {data_dir}")
    return files


def _load_subject_datasets(data_dir: Path) -> tuple[list[SubjectDataset], list[Path]]:
    """Group <subject>_s<k>.tsc files into per-subject session lists."""
    files = _discover_containers(data_dir)
    grouped: dict[str, list[tuple[int, Path]]] = {}
    for path in files:
        stem = path.name[:-len(CONTAINER_SUFFIX)]
        subject, sep, session = stem.rpartition("_s")
        if not sep or not session.isdigit():
            raise ValueError(f"container name {path.name!r} is not <subject>_s<k>{CONTAINER_SUFFIX}")
        grouped.setdefault(subject, []).append((int(session), path))
    datasets = []
    for subject in sorted(grouped):
        sessions = [load_trialset(p) for _, p in sorted(grouped[subject])]
        datasets.append(SubjectDataset(subject, sessions))
    return datasets, files


# ---------------------------------------------------------------------------
# commands


def _canon_synth(ns) -> list[str]:
    return ["--subjects", str(ns.subjects), "--sessions", str(ns.sessions),
            "--trials", str(ns.trials), "--channels", str(ns.channels),
            "--fs", str(ns.fs), "--duration", str(ns.duration),
            "--classes", str(ns.classes), "--shift", str(ns.shift),
            "--snr", str(ns.snr), "--seed", str(_resolve_seed(ns.seed)),
            "--out", str(ns.out)]


def cmd_synth(ns, parser) -> int:
    seed = _resolve_seed(ns.seed)
    out = _out_dir(ns)
    datasets = synth_multisubject(ns.subjects, ns.sessions, ns.trials, ns.channels,
                                  ns.fs, ns.duration, ns.classes, ns.shift, ns.snr, seed)
    outputs = []
    for ds in datasets:
        for k, session in enumerate(ds.sessions, start=1):
            path = out / f"{ds.subject_id}_s{k}{CONTAINER_SUFFIX}"
            save_trialset(session, path)
            outputs.append(path)
    write_manifest(out, "synth", _canon_synth(ns), seed, [], outputs)
    print(f"wrote {len(outputs)} container(s) to {out}")
    return 0


def _canon_preprocess(ns) -> list[str]:
    args = ["--data", str(ns.data), "--notch", str(ns.notch),
            "--low", str(ns.low), "--high", str(ns.high), "--out", str(ns.out)]
    if ns.channels:
        args += ["--channels", ns.channels]
    return args


def cmd_preprocess(ns, parser) -> int:
    out = _out_dir(ns)
    inputs = _discover_containers(Path(ns.data))
    channels = ns.channels.split(",") if ns.channels else None
    outputs = []
    for path in inputs:
        ts = load_trialset(path)
        processed = preprocess_trialset(ts, notch_hz=ns.notch, band=(ns.low, ns.high),
                                        channels=channels)
        dest = out / path.name
        save_trialset(processed, dest)
        outputs.append(dest)
    write_manifest(out, "preprocess", _canon_preprocess(ns), None, inputs, outputs)
    print(f"preprocessed {len(outputs)} container(s) into {out}")
    return 0


def _canon_train(ns) -> list[str]:
    return ["--data", str(ns.data), "--model", ns.model, "--target", ns.target,
            "--regime", ns.regime, "--calib", str(ns.calib),
            "--val", f"{ns.val[0]}:{ns.val[1]}", "--test", f"{ns.test[0]}:{ns.test[1]}",
            "--win", str(ns.win), "--overlap", str(ns.overlap),
            "--lambda", str(getattr(ns, "lambda")), "--batch", str(ns.batch),
            "--epochs", str(ns.epochs), "--patience", str(ns.patience),
            "--lr", str(ns.lr), "--temporal-filters", str(ns.temporal_filters),
            "--temporal-kernel", str(ns.temporal_kernel),
            "--pool-width", str(ns.pool_width), "--pool-stride", str(ns.pool_stride),
            "--dropout", str(ns.dropout),
            "--common-dims", ",".join(str(d) for d in ns.common_dims),
            "--separate-dims", ",".join(str(d) for d in ns.separate_dims),
            "--seed", str(_resolve_seed(ns.seed)),
            "--subjects-note", ns.subjects_note, "--out", str(ns.out)]


def cmd_train(ns, parser) -> int:
    if ns.model in ("scsn", "scsn-mmd") and ns.regime == "single":
        parser.error("multi-branch models require --regime multi (need at least 2 subjects)")
    seed = _resolve_seed(ns.seed)
    out = _out_dir(ns)
    datasets, inputs = _load_subject_datasets(Path(ns.data))
    split = make_splits(datasets, SplitSpec(ns.target, ns.calib, ns.val, ns.test))
    n_train = sum(len(ts) for ts in split.train.values())
    print(f"split: train={n_train} val={len(split.val)} test={len(split.test)}")

    cfg = TrainConfig(
        lr=ns.lr, max_epochs=ns.epochs, patience=ns.patience,
        lam=getattr(ns, "lambda"), batch_per_branch=ns.batch,
        win_s=ns.win, overlap_s=ns.overlap, seed=seed,
        temporal_filters=ns.temporal_filters, temporal_kernel=ns.temporal_kernel,
        pool_width=ns.pool_width, pool_stride=ns.pool_stride, dropout=ns.dropout,
        common_fc_dims=ns.common_dims, separate_fc_dims=ns.separate_dims)
    model, report = train(ns.model.replace("-", "_"), split, cfg, regime=ns.regime)

    ckpt = out / "model.ckpt"
    save_checkpoint(model, ckpt, meta={
        "model": ns.model, "regime": ns.regime, "target": ns.target,
        "subjects": ",".join(sorted(split.train)), "win_s": str(ns.win),
        "overlap_s": str(ns.overlap)})
    report_csv = out / "report.csv"
    report_csv.write_text(report.to_csv_text(), encoding="utf-8")
    summary = out / "summary.txt"
    summary.write_text(report.to_summary_text(), encoding="utf-8")
    write_manifest(out, "train", _canon_train(ns), seed, inputs,
                   [ckpt, report_csv, summary],
                   extras={"wall_time_s": f"{report.wall_time_s:.3f}",
                           "split_sizes": f"{n_train}/{len(split.val)}/{len(split.test)}"})
    print(f"test_crop_accuracy={report.test_crop_accuracy!r}")
    print(f"test_trial_accuracy={report.test_trial_accuracy!r}")
    return 0


def _canon_eval(ns) -> list[str]:
    return ["--ckpt", str(ns.ckpt), "--data", str(ns.data), "--target", ns.target,
            "--calib", str(ns.calib), "--val", f"{ns.val[0]}:{ns.val[1]}",
            "--test", f"{ns.test[0]}:{ns.test[1]}", "--win", str(ns.win),
            "--overlap", str(ns.overlap), "--out", str(ns.out)]


def cmd_eval(ns, parser) -> int:
    out = _out_dir(ns)
    ckpt = Path(ns.ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, meta = load_checkpoint(ckpt)
    datasets, inputs = _load_subject_datasets(Path(ns.data))
    split = make_splits(datasets, SplitSpec(ns.target, ns.calib, ns.val, ns.test))
    branch = model.cfg.target_index if model.kind == "scsn" else None
    crop_acc, trial_acc = evaluate(model, branch, split.test, ns.win, ns.overlap)
    print(f"crop_accuracy={crop_acc!r}")
    print(f"trial_accuracy={trial_acc!r}")
    summary = out / "summary.txt"
    summary.write_text(
        f"model={meta.get('model', model.kind)}\nregime={meta.get('regime', '')}\n"
        f"target_subject={ns.target}\ntest_crop_accuracy={crop_acc!r}\n"
        f"test_trial_accuracy={trial_acc!r}\n", encoding="utf-8")
    write_manifest(out, "eval", _canon_eval(ns), None, [ckpt] + inputs, [summary])
    return 0


def _canon_report(ns) -> list[str]:
    return ["--runs", *[str(r) for r in ns.runs], "--metric", ns.metric,
            "--out", str(ns.out)]


def cmd_report(ns, parser) -> int:
    out = _out_dir(ns)
    rows = []
    inputs = []
    for run_dir in ns.runs:
        summary = Path(run_dir) / "summary.txt"
        if not summary.exists():
            raise FileNotFoundError(f"run summary not found: {summary}")
        fields = dict(line.split("=", 1)
                      for line in summary.read_text(encoding="utf-8").splitlines() if line)
        key = "test_trial_accuracy" if ns.metric == "trial" else "test_crop_accuracy"
        model = fields.get("model_kind", fields.get("model", "unknown")).replace("_", "-")
        rows.append(ComparisonRow(model, fields["regime"], fields["target_subject"],
                                  float(fields[key])))
        inputs.append(summary)
    table = negative_transfer_report(rows)
    report_csv = out / "report.csv"
    report_csv.write_text(table.to_csv_text(), encoding="utf-8")
    summary_txt = out / "summary.txt"
    summary_txt.write_text(table.to_text(), encoding="utf-8")
    write_manifest(out, "report", _canon_report(ns), None, inputs,
                   [report_csv, summary_txt])
    print(table.to_text(), end="")
    return 0


def cmd_rerun(ns, parser) -> int:
    manifest = read_manifest(Path(ns.manifest))
    try:
        command, stored = manifest["command"], shlex.split(manifest["args"])
    except KeyError as missing:
        raise ValueError(f"manifest lacks a {missing} line") from None
    args = list(stored)
    if "--out" in args:
        args[args.index("--out") + 1] = str(ns.out)
    else:
        args += ["--out", str(ns.out)]
    code = main([command, *args])
    if code != 0:
        return code
    out = Path(ns.out)
    mismatched = []
    for name, digest in manifest["outputs"]:
        fresh = out / name
        status = "ok" if fresh.exists() and sha256_file(fresh) == digest else "MISMATCH"
        if status == "MISMATCH":
            mismatched.append(name)
        print(f"{status}\t{name}")
    if mismatched:
        print(f"{len(mismatched)} output(s) differ from the manifest", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scsnet",
        description="Multi-subject transfer-learning pipeline for multi-channel "
                    "time-series classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-subject dataset")
    p.add_argument("--subjects", type=_positive_int, default=5)
    p.add_argument("--sessions", type=_positive_int, default=2)
    p.add_argument("--trials", type=_positive_int, default=288)
    p.add_argument("--channels", type=_positive_int, default=22)
    p.add_argument("--fs", type=_positive_float, default=250.0)
    p.add_argument("--duration", type=_positive_float, default=4.0)
    p.add_argument("--classes", type=_positive_int, default=4)
    p.add_argument("--shift", type=_unit_float, default=0.5,
                   help="subject shift strength in [0, 1]")
    p.add_argument("--snr", type=_positive_float, default=5.0,
                   help="signal-to-noise power ratio")
    p.add_argument("--seed", type=int, default=None,
                   help=f"default: ${SEED_ENV} or 0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="notch + bandpass (+ channel selection)")
    p.add_argument("--data", required=True, help="directory of input containers")
    p.add_argument("--notch", type=_positive_float, default=50.0)
    p.add_argument("--low", type=_positive_float, default=1.0)
    p.add_argument("--high", type=_positive_float, default=100.0)
    p.add_argument("--channels", default=None,
                   help="comma-separated channel names to keep, in order")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a decoder on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=("baseline", "scsn", "scsn-mmd"), required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--regime", choices=("single", "multi"), default="multi")
    p.add_argument("--calib", type=_nonnegative_int, default=120)
    p.add_argument("--val", type=_range_pair, default=(120, 144))
    p.add_argument("--test", type=_range_pair, default=(144, 288))
    p.add_argument("--win", type=_positive_float, default=2.0)
    p.add_argument("--overlap", type=_nonnegative_float, default=1.9)
    p.add_argument("--lambda", type=_nonnegative_float, default=1.0,
                   help="balance of the discrepancy term (scsn-mmd)")
    p.add_argument("--batch", type=_positive_int, default=30)
    p.add_argument("--epochs", type=_positive_int, default=200)
    p.add_argument("--patience", type=_positive_int, default=20)
    p.add_argument("--lr", type=_positive_float, default=1e-3)
    p.add_argument("--temporal-filters", type=_positive_int, default=40)
    p.add_argument("--temporal-kernel", type=_positive_int, default=25)
    p.add_argument("--pool-width", type=_positive_int, default=75)
    p.add_argument("--pool-stride", type=_positive_int, default=15)
    p.add_argument("--dropout", type=_unit_float, default=0.5)
    p.add_argument("--common-dims", type=_dims, default=(128, 128, 128))
    p.add_argument("--separate-dims", type=_dims, default=(64, 64, 64))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--subjects-note", default=SUBJECTS_NOTE,
                   help="informational record of the recommended subject subset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--calib", type=_nonnegative_int, default=120)
    p.add_argument("--val", type=_range_pair, default=(120, 144))
    p.add_argument("--test", type=_range_pair, default=(144, 288))
    p.add_argument("--win", type=_positive_float, default=2.0)
    p.add_argument("--overlap", type=_nonnegative_float, default=1.9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate runs into the negative-transfer table")
    p.add_argument("--runs", nargs="+", required=True, help="run output directories")
    p.add_argument("--metric", choices=("trial", "crop"), default="trial")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("rerun", help="replay a manifest and verify outputs")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="fresh output directory for the replay")
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns, parser)
    except SystemExit:
        raise
    except Exception as err:  # runtime failure -> exit 1, message on stderr
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
