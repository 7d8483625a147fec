"""``heatmap1d`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

Config-driven subcommands read an optional ``key = value`` file (``--config``)
and accept ``--key value`` overrides for any key of that subcommand. Each run
writes ``run.txt`` under ``--out`` holding the subcommand and every resolved
key, and ``--config run.txt`` reproduces the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .codec import HeatmapSpec, output_size, quantization_error, quantize, recover
from .config import ConfigError, coerce, dump_config, load_config
from .detector import DetectorConfig, DetectorParams, Split, TrainingDiverged, detect_batch, train_detector
from .experiments import (ablation_csv, gamma_ablation, lambda_ablation, mean_by, resolution_sweep,
                          sweep_csv)
from .metrics import GROUPS_5, GROUPS_68, evaluate, fmt6
from .synth import (generate_clip_dataset, generate_dataset, load_clips, load_dataset, sample_seed, save_clips,
                    save_dataset)
from .tracker import TrackerConfig, TrackerParams, predict_tracks, tracking_csv, train_tracker

DETECTOR_KEYS = {f.name: f.default for f in dataclasses.fields(DetectorConfig)}
TRACKER_KEYS = {"lambda": 0.3, "clip_length": 8, "track_learning_rate": 1e-3, "track_epochs": 10,
                "track_channels": 16, "finetune": False}
DATA_KEYS = {"F": 64, "N": 5, "seed": 0, "n_train": 500, "n_val": 100, "n_train_clips": 0, "n_val_clips": 0,
             "clip_length": 8, "motion_scale": 1.0, "occlusion_prob": 0.0}
SWEEP_KEYS = {**DETECTOR_KEYS, "L_list": [16, 64, 192], "seeds": [0, 1, 2], "n_train": 500, "n_test": 100,
              "data_seed": 1000}
ABLATE_KEYS = {**DETECTOR_KEYS, **TRACKER_KEYS, "param": "gamma", "values": [0.0, 0.4], "seeds": [0, 1, 2],
               "n_train": 500, "n_test": 100, "data_seed": 1000, "motion_scale": 1.0, "occlusion_prob": 0.3}

SCHEMAS: dict[str, dict[str, Any]] = {
    "gen-data": DATA_KEYS,
    "train-detect": DETECTOR_KEYS,
    "train-track": {**DETECTOR_KEYS, **TRACKER_KEYS},
    "eval": {**DETECTOR_KEYS, **TRACKER_KEYS, "model": "detector", "normalization": "inter-ocular"},
    "sweep": SWEEP_KEYS,
    "ablate": ABLATE_KEYS,
}


class UsageError(Exception):
    pass


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- config plumbing ---------------------------------------------------------------------


def resolve(command: str, config_path: str | None, overrides: Sequence[str]) -> dict[str, Any]:
    schema = SCHEMAS[command]
    values = dict(schema) if config_path is None else load_config(config_path, _schema_with_command(schema))
    values.pop("command", None)
    if len(overrides) % 2:
        raise UsageError(f"override {overrides[-1]!r} has no value")
    for flag, raw in zip(overrides[::2], overrides[1::2]):
        if not flag.startswith("--"):
            raise UsageError(f"expected --key, got {flag!r}")
        key = flag[2:]
        if key not in schema:
            key = key.replace("-", "_")
        if key not in schema:
            raise UsageError(f"unknown key {flag[2:]!r} for {command}")
        try:
            values[key] = coerce(raw, schema[key], key)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return values


def _schema_with_command(schema: dict[str, Any]) -> dict[str, Any]:
    # run.txt files carry a leading ``command`` line
    return {"command": "", **schema}


def write_run(out: Path, command: str, values: dict[str, Any]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.txt").write_text(f"command = {command}\n" + dump_config(values), encoding="utf-8")


def detector_config(values: dict[str, Any]) -> DetectorConfig:
    try:
        return DetectorConfig(**{k: values[k] for k in DETECTOR_KEYS})
    except ValueError as exc:
        raise UsageError(f"invalid detector config: {exc}") from None


def tracker_config(values: dict[str, Any]) -> TrackerConfig:
    try:
        return TrackerConfig(detector_config(values), lam=values["lambda"], clip_length=values["clip_length"],
                             learning_rate=values["track_learning_rate"], epochs=values["track_epochs"],
                             seed=values["seed"], channels=values["track_channels"], finetune=values["finetune"])
    except ValueError as exc:
        raise UsageError(f"invalid tracker config: {exc}") from None


# -- subcommands -------------------------------------------------------------------------


def cmd_analyze_quant(args) -> int:
    try:
        spec0 = HeatmapSpec(args.F, 2)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not (0 <= args.p < spec0.F and 0 <= args.q < spec0.F):
        raise UsageError(f"point ({args.p}, {args.q}) lies outside [0, {args.F})^2")
    rows = ["L,L_over_F,qx,qy,px_rec,py_rec,E"]
    for L in sorted(args.L_list):
        spec = HeatmapSpec(args.F, L)
        qx, qy = quantize(args.p, args.q, spec)
        rx, ry = recover(qx, qy, spec)
        e = quantization_error(args.p, args.q, spec)
        rows.append(f"{L},{fmt6(L / args.F)},{qx},{qy},{fmt6(rx)},{fmt6(ry)},{fmt6(e)}")
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        write_run(out, "analyze-quant", {"p": args.p, "q": args.q, "F": args.F, "L_list": sorted(args.L_list)})
        (out / "quant.csv").write_text(text)
    return 0


def cmd_bench_mem(args) -> int:
    rows = ["kind,N,L,batch,points,bytes,status"]
    for L in sorted(args.L_list):
        points = output_size(args.N, L, args.kind)
        expected = args.batch * points * 8
        if expected > args.limit_bytes:
            rows.append(f"{args.kind},{args.N},{L},{args.batch},{points},{expected},OOM")
            continue
        try:
            shape = (args.batch, 2, args.N, L) if args.kind == "1d" else (args.batch, args.N, L, L)
            buf = np.empty(shape, dtype=np.float64)
            buf.fill(0.0)  # touch every page
            rows.append(f"{args.kind},{args.N},{L},{args.batch},{points},{buf.nbytes},ok")
            del buf
        except MemoryError:
            rows.append(f"{args.kind},{args.N},{L},{args.batch},{points},{expected},OOM")
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        write_run(out, "bench-mem", {"N": args.N, "L_list": sorted(args.L_list), "kind": args.kind,
                                     "batch": args.batch, "limit_bytes": args.limit_bytes})
        (out / "bench_mem.csv").write_text(text)
    return 0


def cmd_gen_data(v: dict, out: Path, args) -> int:
    F, N, seed = v["F"], v["N"], v["seed"]
    params = dict(v)
    t0 = time.perf_counter()
    for name, n, idx in (("train", v["n_train"], 0), ("val", v["n_val"], 1)):
        if n > 0:
            data = generate_dataset(n, F, N, sample_seed(seed, idx))
            save_dataset(out / name, data, {**params, "split": name})
    for name, n, idx in (("train", v["n_train_clips"], 2), ("val", v["n_val_clips"], 3)):
        if n > 0:
            clips = generate_clip_dataset(n, F, N, v["clip_length"], sample_seed(seed, idx), v["motion_scale"],
                                          v["occlusion_prob"])
            save_clips(out / name, clips, {**params, "split": name})
    _say(f"wrote data under {out} in {time.perf_counter() - t0:.1f}s")
    return 0


def _load_split(data: Path, name: str, required: bool = True):
    if not (data / name / "images").is_dir():
        if required:
            raise FileNotFoundError(f"no {name} images under {data / name}")
        return None
    return load_dataset(data / name)


def cmd_train_detect(v: dict, out: Path, args) -> int:
    cfg = detector_config(v)
    data = Path(_require(args.data, "--data"))
    train = _load_split(data, "train")
    val = _load_split(data, "val", required=False) or train.subset([])
    _check_data(train, cfg.F, cfg.N)
    try:
        res = train_detector(Split(train, val), cfg, log_path=out / "log.csv", checkpoint_path=out / "detector.ckpt",
                             progress=_say)
    except TrainingDiverged as exc:
        _say(f"error: {exc}; last good checkpoint kept at {out / 'detector.ckpt'}")
        return 1
    res.params.save(out / "detector.ckpt")
    return 0


def cmd_train_track(v: dict, out: Path, args) -> int:
    cfg = tracker_config(v)
    data = Path(_require(args.data, "--data"))
    train = load_clips(data / "train")
    val = load_clips(data / "val") if (data / "val" / "clips").is_dir() else None
    det = None
    if args.detector:
        det = DetectorParams.load(args.detector, cfg.detector)
    try:
        res = train_tracker(train, cfg, val=val, detector=det, log_path=out / "log.csv",
                            checkpoint_path=out / "tracker.ckpt", progress=_say)
    except TrainingDiverged as exc:
        _say(f"error: {exc}")
        return 1
    res.params.save(out / "tracker.ckpt")
    return 0


def cmd_eval(v: dict, out: Path, args) -> int:
    ckpt = _require(args.checkpoint, "--checkpoint")
    data = Path(_require(args.data, "--data"))
    groups = GROUPS_68 if v["N"] == 68 else GROUPS_5
    if v["normalization"] not in ("inter-ocular", "face-size"):
        raise UsageError(f"normalization must be inter-ocular or face-size, got {v['normalization']!r}")
    if v["model"] == "detector":
        cfg = detector_config(v)
        params = DetectorParams.load(ckpt, cfg)
        split = data if (data / "images").is_dir() else data / "val"
        ds = load_dataset(split)
        _check_data(ds, cfg.F, cfg.N)
        pred, gt = detect_batch(ds.images, params), ds.landmarks
    elif v["model"] == "tracker":
        cfg = tracker_config(v)
        params = TrackerParams.load(ckpt, cfg)
        split = data if (data / "clips").is_dir() else data / "val"
        clips = load_clips(split)
        tracks = predict_tracks(clips, params)
        for c, coords in enumerate(tracks):
            (out / f"track_{c:04d}.csv").write_text(tracking_csv(coords))
        pred = tracks.reshape(-1, cfg.detector.N, 2)
        gt = clips.tracks.reshape(-1, cfg.detector.N, 2)
    else:
        raise UsageError(f"model must be detector or tracker, got {v['model']!r}")
    report = evaluate(pred, gt, groups, normalization=v["normalization"], config=dict(v))
    lines = ["sample,nrmse"] + [f"{i},{fmt6(x)}" for i, x in enumerate(report.per_sample)]
    (out / "eval.csv").write_text("\n".join(lines) + "\n")
    summary = [f"mean,{fmt6(report.mean)}"] + [f"{k},{fmt6(x)}" for k, x in report.groups.items()]
    (out / "summary.csv").write_text("group,nrmse\n" + "\n".join(summary) + "\n")
    _say(f"mean NRMSE {fmt6(report.mean)}% over {len(report.per_sample)} samples")
    return 0


def cmd_sweep(v: dict, out: Path, args) -> int:
    base = detector_config(v)
    train = generate_dataset(v["n_train"], base.F, base.N, v["data_seed"])
    test = generate_dataset(v["n_test"], base.F, base.N, v["data_seed"] + 1)
    rows = resolution_sweep(v["L_list"], train, test, base, v["seeds"], progress=_say)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    for L, m in mean_by(rows, "L").items():
        _say(f"L={L} mean NRMSE {fmt6(m)}")
    return 0


def cmd_ablate(v: dict, out: Path, args) -> int:
    if v["param"] == "gamma":
        base = detector_config(v)
        train = generate_dataset(v["n_train"], base.F, base.N, v["data_seed"])
        test = generate_dataset(v["n_test"], base.F, base.N, v["data_seed"] + 1)
        rows = gamma_ablation(v["values"], train, test, base, v["seeds"], progress=_say)
    elif v["param"] == "lambda":
        base = tracker_config(v)
        mk = lambda n, s: generate_clip_dataset(n, base.detector.F, base.detector.N, base.clip_length, s,
                                                v["motion_scale"], v["occlusion_prob"])
        rows = lambda_ablation(v["values"], mk(v["n_train"], v["data_seed"]), mk(v["n_test"], v["data_seed"] + 1),
                               base, v["seeds"], progress=_say)
    else:
        raise UsageError(f"param must be gamma or lambda, got {v['param']!r}")
    (out / "ablation.csv").write_text(ablation_csv(rows))
    for val, m in mean_by(rows, "value").items():
        _say(f"{v['param']}={val} mean NRMSE {fmt6(m)}")
    return 0


def _require(value, flag: str):
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def _check_data(ds, F: int, N: int) -> None:
    if ds.F != F or ds.N != N:
        raise UsageError(f"data has F={ds.F}, N={ds.N} but config says F={F}, N={N}")


HANDLERS: dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "train-detect": cmd_train_detect,
    "train-track": cmd_train_track,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


# -- parser ------------------------------------------------------------------------------


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heatmap1d", description="1D heatmap landmark detection and tracking")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("analyze-quant", help="quantization error of a point at several heatmap lengths")
    q.add_argument("--p", type=float, required=True)
    q.add_argument("--q", type=float, required=True)
    q.add_argument("--F", type=int, default=256)
    q.add_argument("--L-list", dest="L_list", type=_int_list, default=[64, 128, 256, 512, 768])
    q.add_argument("--out")

    b = sub.add_parser("bench-mem", help="allocate output buffers for a batch and report their size")
    b.add_argument("--N", type=int, default=68)
    b.add_argument("--L-list", dest="L_list", type=_int_list, default=[64, 128, 256, 512, 768])
    b.add_argument("--kind", choices=["1d", "2d"], default="1d")
    b.add_argument("--batch", type=int, default=10)
    b.add_argument("--limit-bytes", dest="limit_bytes", type=int, default=1 << 30,
                   help="buffers larger than this are reported as OOM without allocating")
    b.add_argument("--out")

    helps = {
        "gen-data": "write synthetic train/val images, landmarks and clips",
        "train-detect": "train the image detector",
        "train-track": "train the video tracker on top of a detector",
        "eval": "NRMSE of a detector or tracker checkpoint on the val split",
        "sweep": "test NRMSE across heatmap lengths L",
        "ablate": "test NRMSE across values of gamma or lambda",
    }
    for name in HANDLERS:
        p = sub.add_parser(name, help=f"{helps[name]}; --key value overrides any config key")
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        if name in ("train-detect", "train-track", "eval"):
            p.add_argument("--data")
        if name == "train-track":
            p.add_argument("--detector", help="pre-trained detector checkpoint; skips phase 1")
        if name == "eval":
            p.add_argument("--checkpoint")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "analyze-quant":
            _no_extra(extra)
            return cmd_analyze_quant(args)
        if args.command == "bench-mem":
            _no_extra(extra)
            return cmd_bench_mem(args)
        values = resolve(args.command, args.config, extra)
        out = Path(args.out)
        write_run(out, args.command, values)
        return HANDLERS[args.command](values, out, args)
    except (UsageError, ConfigError) as exc:
        print(f"heatmap1d {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"heatmap1d {args.command}: failed: {exc}", file=sys.stderr)
        return 1


def _no_extra(extra: Sequence[str]) -> None:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")


if __name__ == "__main__":
    sys.exit(main())
