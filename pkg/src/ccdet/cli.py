"""Command-line entry points for the whole pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Flags override config-file keys; the effective merged config is echoed into
the output directory for provenance.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data as dio
from . import train as trainer
from .errors import DataFormatError, NumericalError
from .evaluate import EvalReport
from .head import LossParams, derive_alpha
from .model import Detector, desk_preset, full_preset
from .tmatch import Template, detect_tm

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _load_config_file(path):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_DATA, f"cannot read config {path}: {exc}")
    return raw


def _take_section(raw, name, cls):
    """Build a dataclass from a config section, rejecting unknown keys."""
    section = dict(raw.get(name, {}))
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        _fail(EXIT_USAGE, f"unknown keys in config section {name!r}: {sorted(unknown)}")
    for key in ("length_clip", "amplitude_range"):
        if key in section:
            section[key] = tuple(section[key])
    return cls(**section)


def _check_sections(raw, allowed):
    unknown = set(raw) - set(allowed)
    if unknown:
        _fail(EXIT_USAGE, f"unknown top-level config keys: {sorted(unknown)}")


def _model_from_args(args, raw):
    preset = desk_preset if args.preset == "desk" else full_preset
    overrides = dict(raw.get("model", {}))
    if args.no_context:
        overrides["contextual"] = False
    if args.scales:
        overrides["active_scales"] = _parse_scales(args.scales)
    if args.seed is not None:
        overrides["seed"] = args.seed
    loss_over = dict(raw.get("loss", {}))
    if args.alpha is not None:
        loss_over["alpha"] = args.alpha
    if getattr(args, "lam", None) is not None:
        loss_over["lam"] = args.lam
    known = {f.name for f in dataclasses.fields(LossParams)}
    unknown = set(loss_over) - known
    if unknown:
        _fail(EXIT_USAGE, f"unknown loss keys: {sorted(unknown)}")
    loss = LossParams(**loss_over)
    try:
        cfg = preset(loss=loss, **{k: tuple(v) if isinstance(v, list) else v
                                   for k, v in overrides.items()})
    except TypeError as exc:
        _fail(EXIT_USAGE, f"bad model config: {exc}")
    return Detector(cfg)


def _parse_scales(spec):
    if ".." in spec:
        lo, hi = spec.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(s) for s in spec.split(","))


def _echo_config(out_dir, payload):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(
        json.dumps(payload, indent=2, default=_jsonable))


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    return str(obj)


def _limit_threads(n):
    if not n:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass  # thread cap is best-effort without threadpoolctl


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args):
    raw = _load_config_file(args.config) if args.config else {}
    _check_sections(raw, {"synth"})
    cfg = _take_section(raw, "synth", dio.SynthConfig)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    try:
        dataset = dio.generate_synthetic(cfg)
    except ValueError as exc:
        _fail(EXIT_DATA, str(exc))
    dio.save_dataset(args.out, dataset)
    _echo_config(args.out, {"synth": cfg})
    print(f"wrote {len(dataset.events)} events over {len(dataset.waveform)} "
          f"samples to {args.out}")


def cmd_train(args):
    raw = _load_config_file(args.config) if args.config else {}
    _check_sections(raw, {"model", "loss", "train"})
    _limit_threads(args.threads)
    dataset = _load_dataset(args.data)
    model = _model_from_args(args, raw)
    tcfg = _take_section(raw, "train", trainer.TrainConfig)
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = dataclasses.replace(tcfg,
                               checkpoint_path=str(out / "model.ckpt"),
                               metrics_path=str(out / "metrics.csv"))
    _echo_config(out, {"model": model.config, "train": tcfg})

    def progress(m):
        print(f"epoch {m.epoch}: loss {m.loss:.4f} val_map {m.val_map:.4f} "
              f"lr {m.lr:.2e}", flush=True)

    try:
        trainer.train(model, dataset, tcfg, progress=progress)
    except NumericalError as exc:
        _fail(EXIT_NUMERICAL, str(exc))
    print(f"checkpoint written to {out / 'model.ckpt'}")


def cmd_detect(args):
    raw = _load_config_file(args.config) if args.config else {}
    _check_sections(raw, {"model", "loss"})
    _limit_threads(args.threads)
    dataset = _load_dataset(args.data)
    model = _model_from_args(args, raw)
    _load_checkpoint(model, args.checkpoint)
    begin, end = dataset.split_region(args.split)
    dets = trainer.detect_over_region(model, dataset.waveform, begin, end)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dio.save_detections_csv(out / "detections.csv", dets)
    _echo_config(out, {"model": model.config, "split": args.split})
    print(f"{len(dets)} detections written to {out / 'detections.csv'}")


def cmd_eval(args):
    _limit_threads(args.threads)
    dataset = _load_dataset(args.data)
    events = dataset.split_events(args.split)
    if args.detections:
        try:
            dets = dio.load_detections_csv(args.detections)
        except DataFormatError as exc:
            _fail(EXIT_DATA, str(exc))
    else:
        raw = _load_config_file(args.config) if args.config else {}
        _check_sections(raw, {"model", "loss"})
        model = _model_from_args(args, raw)
        _load_checkpoint(model, args.checkpoint)
        begin, end = dataset.split_region(args.split)
        dets = trainer.detect_over_region(model, dataset.waveform, begin, end)
    report = trainer.evaluate_detections(dets, events)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    if args.plot:
        _plot_pr(out / "pr_curve.svg", dets, events)
    print(f"map {report.map:.4f} (tp {report.tp}, fp {report.fp}, "
          f"missed {report.missed}); report at {out / 'report.json'}")


def cmd_tm_baseline(args):
    _limit_threads(args.threads)
    dataset = _load_dataset(args.data)
    templates = []
    for ev in dataset.split_events("train"):
        samples = dataset.waveform[ev.begin:ev.end]
        try:
            templates.append(Template(samples, ev))
        except ValueError:
            continue
    begin, end = dataset.split_region(args.split)
    dets = detect_tm(templates, dataset.waveform[begin:end], mu=args.mu)
    from .evaluate import Detection, Interval
    dets = [Detection(Interval(d.interval.begin + begin, d.interval.end + begin),
                      d.score, -1) for d in dets]
    report = trainer.evaluate_detections(dets, dataset.split_events(args.split))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dio.save_detections_csv(out / "detections.csv", dets)
    (out / "report.json").write_text(report.to_json())
    _echo_config(out, {"mu": args.mu, "split": args.split})
    print(f"template-matching map {report.map:.4f} with {len(templates)} templates")


def cmd_gradcheck(args):
    from .gradreport import run_gradcheck_suite
    report = run_gradcheck_suite(trials=args.trials, verbose=True)
    if report["failed"]:
        _fail(EXIT_NUMERICAL, f"gradient check failed: {report}")
    print(f"gradcheck passed: max relative error {report['max_rel_error']:.3e}")


def cmd_ablate(args):
    _limit_threads(args.threads)
    dataset = _load_dataset(args.data)
    seeds = list(range(args.seeds))
    variants = {
        "contextual-multiscale": dict(contextual=True, active_scales=None),
        "noncontextual-multiscale": dict(contextual=False, active_scales=None),
        "contextual-singlescale": dict(contextual=True, active_scales=(1,)),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for name, overrides in variants.items():
        maps = []
        for seed in seeds:
            model = Detector(desk_preset(seed=seed, **overrides))
            tcfg = trainer.TrainConfig(epochs=args.epochs, seed=seed)
            trainer.train(model, dataset, tcfg)
            maps.append(trainer.evaluate(model, dataset, "test").map)
            print(f"{name} seed {seed}: map {maps[-1]:.4f}", flush=True)
        results[name] = {"per_seed": maps, "mean": float(np.mean(maps))}
    (out / "ablation.json").write_text(json.dumps(results, indent=2))
    width = max(len(k) for k in results)
    print(f"{'variant'.ljust(width)}  mean-AP")
    for name, res in results.items():
        print(f"{name.ljust(width)}  {res['mean']:.4f}")


def _plot_pr(path, dets, events):
    try:
        import matplotlib
        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib unavailable; skipping plot", file=sys.stderr)
        return
    from .evaluate import detection_sort_key, match_detections
    order = sorted(range(len(dets)), key=lambda i: detection_sort_key(dets[i]))
    flags = match_detections(dets, events, 0.5)
    tp = np.cumsum([1.0 if flags[i] else 0.0 for i in order])
    n = np.arange(1, len(order) + 1)
    fig, ax = plt.subplots()
    ax.plot(tp / max(len(events), 1), tp / n)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title("PR at IoU 0.5")
    fig.savefig(path, format="svg")
    plt.close(fig)


def _load_dataset(path):
    try:
        return dio.load_dataset(path)
    except (DataFormatError, OSError) as exc:
        _fail(EXIT_DATA, f"cannot load dataset from {path}: {exc}")


def _load_checkpoint(model, path):
    if not path:
        _fail(EXIT_USAGE, "a --checkpoint is required")
    try:
        model.load_checkpoint(path)
    except (DataFormatError, OSError, KeyError) as exc:
        _fail(EXIT_DATA, f"cannot load checkpoint {path}: {exc}")


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ccdet",
                                     description="1D seismic event detector")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, model=False):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--config", default=None, help="JSON config path")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if model:
            p.add_argument("--preset", choices=("desk", "full"), default="desk")
            p.add_argument("--no-context", action="store_true")
            p.add_argument("--scales", default=None,
                           help="active scale subset, e.g. 0..2 or 1")
            p.add_argument("--alpha", type=float, default=None)
            p.add_argument("--lambda", dest="lam", type=float, default=None)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    common(p, model=True)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="write detections for a split")
    common(p, model=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="evaluate detections or a checkpoint")
    common(p, model=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--detections", default=None,
                   help="evaluate a detections CSV instead of a checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--plot", action="store_true", help="write a PR curve SVG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tm-baseline", help="run the template-matching baseline")
    common(p)
    p.add_argument("--mu", type=float, default=8.0)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_tm_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="contextual / multi-scale ablation grid")
    common(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=6)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        raise SystemExit(EXIT_USAGE if exc.code not in (0, None) else 0)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
