"""Command-line entry point.

Every subcommand accepts ``--config <json>`` whose keys are overridden by
explicit flags, and ``--seed``.  Exit status is 0 on success, 2 for invalid
input or configuration, 3 when inference collapses.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


from .harness import (
    ABLATION_ROWS,
    LabeledTrace,
    ModelKind,
    TrainConfig,
    as_labeled,
    decode,
    decoded_to_csv,
    emit_trace_plot,
    evaluate_accuracy,
    ingest_trace,
    labels_from_spans,
    read_decoded_csv,
    run_ablation,
    run_ve_experiment,
    train_model,
    ve_rows_to_csv,
    write_trace,
)
from .inference import BeamConfig, InferenceCollapse
from .learning import EmConfig, ScheduleKind, TraceCollapse, load_annotations, save_annotations
from .model import BuildingMap, ModelParams
from .simulator import PlacementError, SimConfig, generate_dataset

EXIT_OK, EXIT_INVALID, EXIT_COLLAPSE = 0, 2, 3


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


def _pick(args, cfg: dict, name: str, default):
    """Flag value if given, else config value, else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name.replace("_", "-"), cfg.get(name, default))


def _sim_config(args, cfg: dict) -> SimConfig:
    sim = SimConfig.from_dict(cfg.get("simulator", {}))
    if args.seed is not None:
        sim = sim.replace(seed=args.seed)
    return sim


def _train_config(args, cfg: dict) -> TrainConfig:
    t = cfg.get("train", {})
    known = {"max_iters", "rel_ll_tolerance", "dirichlet_smoothing", "train_beam", "decode_beam", "velocity_em_iters", "motion_stickiness"}
    unknown = set(t) - known
    if unknown:
        raise ValueError(f"unknown training settings: {sorted(unknown)}")
    em = EmConfig(
        int(_pick(args, t, "max_iters", 50)),
        float(t.get("rel_ll_tolerance", 1e-5)),
        float(t.get("dirichlet_smoothing", 0.1)),
    )
    return TrainConfig(
        em=em,
        train_beam=BeamConfig(max_states=int(t.get("train_beam", 500))),
        decode_beam=BeamConfig(max_states=int(_pick(args, t, "beam", t.get("decode_beam", 1000)))),
        velocity_em_iters=int(t.get("velocity_em_iters", 1)),
        motion_stickiness=float(t.get("motion_stickiness", 0.5)),
        seed=0 if args.seed is None else args.seed,
    )


def _load_labeled(bmap: BuildingMap, trace_paths, label_paths) -> list[LabeledTrace]:
    if len(trace_paths) != len(label_paths):
        raise ValueError(f"{len(trace_paths)} traces but {len(label_paths)} label files")
    out = []
    for tp, lp in zip(trace_paths, label_paths):
        frames = _ingest(tp, bmap)
        s, e = labels_from_spans(load_annotations(lp), len(frames))
        out.append(LabeledTrace(frames, s, e))
    return out


def _ingest(path, bmap):
    res = ingest_trace(path, bmap)
    if res.dropped_fixes:
        print(f"warning: {path}: dropped {res.dropped_fixes} GPS fixes outside the world", file=sys.stderr)
    return res.frames


def _dataset(args, cfg):
    """Traces from a simulate output directory, or simulated in memory."""
    if args.data is not None:
        d = Path(args.data)
        bmap = BuildingMap.load(d / "map.json")
        traces = sorted(d.glob("trace_*.jsonl"))
        labels = [d / t.name.replace("trace_", "labels_").replace(".jsonl", ".json") for t in traces]
        if not traces:
            raise ValueError(f"{d}: no trace_*.jsonl files")
        return bmap, _load_labeled(bmap, traces, labels)
    sim = _sim_config(args, cfg)
    n = int(_pick(args, cfg, "traces", 10))
    length = int(_pick(args, cfg, "frames", 2400))
    world, traces = generate_dataset(sim, n, length)
    return world, [as_labeled(t) for t in traces]


def _write(path, text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg):
    sim = _sim_config(args, cfg)
    n = int(_pick(args, cfg, "traces", 10))
    length = int(_pick(args, cfg, "frames", 2400))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world, traces = generate_dataset(sim, n, length)
    world.save(out / "map.json")
    (out / "simulator.json").write_text(json.dumps(sim.to_dict(), indent=1))
    for i, t in enumerate(traces):
        write_trace(out / f"trace_{i:02d}.jsonl", t.frames)
        save_annotations(t.spans, out / f"labels_{i:02d}.json")
        (out / f"truth_{i:02d}.json").write_text(json.dumps(t.truth_to_dict()))
    return EXIT_OK


def cmd_train(args, cfg):
    bmap = BuildingMap.load(args.map)
    traces = _load_labeled(bmap, args.traces, args.labels)
    kind = ModelKind(_pick(args, cfg, "model", "full"))
    schedule = ScheduleKind(_pick(args, cfg, "schedule", "hard"))
    percent = float(_pick(args, cfg, "drop", 0.0))
    params = train_model(kind, traces, bmap, _train_config(args, cfg), schedule, percent)
    params.save(args.out)
    return EXIT_OK


def cmd_decode(args, cfg):
    bmap = BuildingMap.load(args.map)
    params = ModelParams.load(args.params)
    kind = ModelKind(_pick(args, cfg, "model", "full"))
    frames = _ingest(args.trace, bmap)
    res = decode(kind, params, frames, bmap, _train_config(args, cfg).decode_beam)
    _write(args.out, decoded_to_csv(res.path))
    return EXIT_OK


def cmd_evaluate(args, cfg):
    if len(args.decoded) != len(args.labels):
        raise ValueError(f"{len(args.decoded)} decoded files but {len(args.labels)} label files")
    ds, de, ts, te = [], [], [], []
    for dp, lp in zip(args.decoded, args.labels):
        _, s, e = read_decoded_csv(dp)
        a, b = labels_from_spans(load_annotations(lp), len(s))
        ds.append(s)
        de.append(e)
        ts.append(a)
        te.append(b)
    sa, ea = evaluate_accuracy(ds, ts), evaluate_accuracy(de, te)
    lines = ["variable,mean,ci95"]
    lines += [f"state,{sa.mean:.6f},{sa.ci95:.6f}", f"env,{ea.mean:.6f},{ea.ci95:.6f}"]
    _write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_ablate(args, cfg):
    bmap, traces = _dataset(args, cfg)
    rows = tuple(_pick(args, cfg, "rows", ABLATION_ROWS))
    res = run_ablation(traces, bmap, _train_config(args, cfg), rows)
    _write(args.out, res.to_csv())
    return EXIT_OK


def cmd_ve_curve(args, cfg):
    bmap, traces = _dataset(args, cfg)
    percents = [float(p) for p in _pick(args, cfg, "percents", [0, 50, 90, 100])]
    kinds = [ScheduleKind(k) for k in _pick(args, cfg, "kinds", ["two-way", "all-uniform"])]
    repeats = int(_pick(args, cfg, "repeats", 0))
    rows = run_ve_experiment(
        traces, bmap, percents, kinds, repeats, _train_config(args, cfg),
        ModelKind(_pick(args, cfg, "model", "joint-msb")), 0 if args.seed is None else args.seed,
    )
    _write(args.out, ve_rows_to_csv(rows))
    return EXIT_OK


def cmd_plot(args, cfg):
    bmap = BuildingMap.load(args.map)
    frames = _ingest(args.trace, bmap)
    cells, states, envs = read_decoded_csv(args.decoded)
    svg, table = emit_trace_plot(cells, envs, states, frames, bmap)
    Path(args.svg).write_text(svg)
    _write(args.csv, table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="activitydbn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with defaults for this command")
        p.add_argument("--seed", type=int, help="random seed")
        return p

    p = common(sub.add_parser("simulate", help="generate a synthetic world and labeled traces"))
    p.add_argument("--traces", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    kinds = [k.value for k in ModelKind]
    p = common(sub.add_parser("train", help="fit model parameters"))
    p.add_argument("--map", required=True)
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--model", choices=kinds)
    p.add_argument("--schedule", choices=[k.value for k in ScheduleKind])
    p.add_argument("--drop", type=float, help="percent of each label span to hide")
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("decode", help="most likely joint path of one trace"))
    p.add_argument("--map", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--model", choices=kinds)
    p.add_argument("--beam", type=int, help="max retained states per frame")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decode)

    p = common(sub.add_parser("evaluate", help="frame accuracy of decoded paths"))
    p.add_argument("--decoded", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (
        ("ablate", cmd_ablate, "leave-one-out accuracy of each model variant"),
        ("ve-curve", cmd_ve_curve, "accuracy against the share of dropped labels"),
    ):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--data", help="directory written by simulate (default: simulate in memory)")
        p.add_argument("--traces", type=int)
        p.add_argument("--frames", type=int)
        p.add_argument("--beam", type=int)
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--out")
        p.set_defaults(func=func)
        if name == "ablate":
            p.add_argument("--rows", nargs="+", choices=ABLATION_ROWS)
        else:
            p.add_argument("--percents", nargs="+", type=float)
            p.add_argument("--kinds", nargs="+", choices=[k.value for k in ScheduleKind])
            p.add_argument("--repeats", type=int)
            p.add_argument("--model", choices=kinds)

    p = common(sub.add_parser("plot", help="SVG and CSV of a decoded path"))
    p.add_argument("--map", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--decoded", required=True)
    p.add_argument("--svg", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except (InferenceCollapse, TraceCollapse) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    except (ValueError, OSError, PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
