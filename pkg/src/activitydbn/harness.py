"""Experiment plumbing: trace files, model variants, cross-validation, metrics, plots.

Every ablation row is the same DBN with pieces switched off:

- ``adaboost``: per-frame arg-max of the classifier bins, no temporal model;
- ``state-msb`` / ``env-msb``: one activity variable, sensor board only;
- ``joint-msb``: state and environment jointly, sensor board only;
- ``joint-msb-gps``: full spatial model without the map factor;
- ``full``: everything.

Single-variable and joint sensor-board rows run on a one-cell world with
one speed and one heading, which turns the DBN into a plain HMM.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .factors import ALL_FACTORS, Factors
from .inference import BeamConfig, ExpectedCounts, ViterbiResult, viterbi_decode
from .learning import (
    EmConfig,
    ScheduleKind,
    VeSchedule,
    drop_labels,
    e_step,
    em_train,
    expand_annotations,
    initialize_params,
    m_step,
    random_single_frame,
)
from .model import (
    ADMISSIBLE,
    FRAME_RATE_HZ,
    N_ENVS,
    N_STATES,
    SPEED_BINS,
    BuildingMap,
    Environment,
    Frame,
    GpsFix,
    JointState,
    LabelSpan,
    ModelParams,
    MotionState,
    MsbObservation,
    ParseError,
    spans_from_labels,
)

EARTH_RADIUS_M = 6_371_000.0


class ConfigError(ValueError):
    """Inputs are well-formed but the requested setup is inconsistent."""


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

def project_equirectangular(lat: float, lon: float, ref_lat: float, ref_lon: float) -> tuple[float, float]:
    """Local (east, north) metres about a reference point."""
    x = EARTH_RADIUS_M * math.radians(lon - ref_lon) * math.cos(math.radians(ref_lat))
    y = EARTH_RADIUS_M * math.radians(lat - ref_lat)
    return x, y


@dataclass
class IngestResult:
    frames: list[Frame]
    dropped_fixes: int = 0
    merged_fixes: int = 0


def ingest_trace(path, bmap: BuildingMap) -> IngestResult:
    """Read a JSON-lines trace: an optional header, ``msb`` records and ``gps`` records.

    GPS timestamps snap to the nearest frame; when several fixes land on the
    same frame the one closest in time wins.  Fixes outside the world are
    dropped and counted.
    """
    ref = None
    msb: dict[int, MsbObservation] = {}
    fixes: dict[int, tuple[float, GpsFix]] = {}
    dropped = merged = 0
    pending_latlon = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                kind = rec["type"]
                if kind == "header":
                    if "reference" in rec and rec["reference"] is not None:
                        ref = (float(rec["reference"]["lat"]), float(rec["reference"]["lon"]))
                elif kind == "msb":
                    k = int(rec["frame"])
                    if k in msb:
                        raise ValueError(f"duplicate msb record for frame {k}")
                    msb[k] = MsbObservation(tuple(rec["state_bins"]), tuple(rec["env_bins"]))
                elif kind == "gps":
                    t = float(rec["t"])
                    hdop = float(rec["hdop"])
                    if "lat" in rec:
                        pending_latlon.append((lineno, t, float(rec["lat"]), float(rec["lon"]), hdop))
                        continue
                    fix = GpsFix(float(rec["x"]), float(rec["y"]), hdop)
                    dropped, merged = _place_fix(fixes, t, fix, bmap, dropped, merged)
                else:
                    raise ValueError(f"unknown record type {kind!r}")
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc.msg}") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    if pending_latlon and ref is None:
        raise ConfigError(f"{path}: lat/lon fixes need a reference point in the header")
    for lineno, t, lat, lon, hdop in pending_latlon:
        x, y = project_equirectangular(lat, lon, *ref)
        try:
            fix = GpsFix(x, y, hdop)
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
        dropped, merged = _place_fix(fixes, t, fix, bmap, dropped, merged)
    if not msb:
        raise ParseError(f"{path}: no msb records")
    n = max(msb) + 1
    missing = sorted(set(range(n)) - set(msb))
    if missing:
        raise ParseError(f"{path}: msb records missing for frame {missing[0]}")
    frames = []
    for k in range(n):
        fix = fixes.get(k)
        frames.append(Frame(k, msb[k], fix[1] if fix else None))
    dropped += sum(1 for k in fixes if k >= n)
    return IngestResult(frames, dropped, merged)


def _place_fix(fixes, t, fix, bmap, dropped, merged):
    if not (0 <= fix.x_m < bmap.width and 0 <= fix.y_m < bmap.height):
        return dropped + 1, merged
    k = int(round(t * FRAME_RATE_HZ))
    if k < 0:
        return dropped + 1, merged
    off = abs(t * FRAME_RATE_HZ - k)
    if k in fixes:
        merged += 1
        if off >= fixes[k][0]:
            return dropped, merged
    fixes[k] = (off, fix)
    return dropped, merged


def write_trace(path, frames: Sequence[Frame]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"type": "header", "version": 1}) + "\n")
        for f in frames:
            fh.write(json.dumps({"type": "msb", "frame": f.index, "state_bins": list(f.msb.state_bins), "env_bins": list(f.msb.env_bins)}) + "\n")
            if f.gps is not None:
                fh.write(json.dumps({"type": "gps", "t": f.index / FRAME_RATE_HZ, "x": f.gps.x_m, "y": f.gps.y_m, "hdop": f.gps.hdop}) + "\n")


# ---------------------------------------------------------------------------
# Model variants
# ---------------------------------------------------------------------------

def _pairs(mapping: dict) -> np.ndarray:
    out = np.zeros((N_STATES, N_ENVS), dtype=bool)
    for s, e in mapping.items():
        out[s, e] = True
    return out


# Each state gets one stand-in environment (and vice versa) so a single
# variable can run through the joint machinery unchanged.
STATE_STANDIN_ENV = {
    MotionState.STATIONARY: Environment.OUTDOORS,
    MotionState.WALKING: Environment.OUTDOORS,
    MotionState.RUNNING: Environment.OUTDOORS,
    MotionState.DRIVING_VEHICLE: Environment.VEHICLE,
    MotionState.UP_DOWN_STAIRS: Environment.INDOORS,
}
ENV_STANDIN_STATE = {
    Environment.INDOORS: MotionState.STATIONARY,
    Environment.OUTDOORS: MotionState.WALKING,
    Environment.VEHICLE: MotionState.DRIVING_VEHICLE,
}
STATE_ONLY_PAIRS = _pairs(STATE_STANDIN_ENV)
ENV_ONLY_PAIRS = _pairs({s: e for e, s in ENV_STANDIN_STATE.items()})


class ModelKind(Enum):
    STATE_MSB = "state-msb"
    ENV_MSB = "env-msb"
    JOINT_MSB = "joint-msb"
    JOINT_MSB_GPS = "joint-msb-gps"
    FULL = "full"

    @property
    def collapsed(self) -> bool:
        return self in (ModelKind.STATE_MSB, ModelKind.ENV_MSB, ModelKind.JOINT_MSB)

    @property
    def pairs(self) -> np.ndarray:
        if self is ModelKind.STATE_MSB:
            return STATE_ONLY_PAIRS
        if self is ModelKind.ENV_MSB:
            return ENV_ONLY_PAIRS
        return ADMISSIBLE

    @property
    def factors(self) -> Factors:
        if self is ModelKind.STATE_MSB:
            return Factors(state_obs=True, env_obs=False, gps=False, map=False)
        if self is ModelKind.ENV_MSB:
            return Factors(state_obs=False, env_obs=True, gps=False, map=False)
        if self is ModelKind.JOINT_MSB:
            return Factors(gps=False, map=False)
        if self is ModelKind.JOINT_MSB_GPS:
            return Factors(map=False)
        return ALL_FACTORS

    def world(self, bmap: BuildingMap) -> BuildingMap:
        return BuildingMap(1, 1) if self.collapsed else bmap

    def relabel(self, states: np.ndarray, envs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Labels as this variant sees them (stand-ins for the dropped variable)."""
        states, envs = np.asarray(states), np.asarray(envs)
        if self is ModelKind.STATE_MSB:
            return states, np.array([STATE_STANDIN_ENV[MotionState(s)] for s in states], dtype=int)
        if self is ModelKind.ENV_MSB:
            return np.array([ENV_STANDIN_STATE[Environment(e)] for e in envs], dtype=int), envs
        return states, envs

    def init_params(self, bmap: BuildingMap, seed: int = 0, jitter: float = 0.01, stickiness: float = 0.0) -> ModelParams:
        w = self.world(bmap)
        if self.collapsed:
            return initialize_params(seed, 1, 1, (0.0,), 1, self.pairs, jitter)
        return sticky_motion(initialize_params(seed, w.width, w.height, SPEED_BINS, 8, self.pairs, jitter), stickiness)


def sticky_motion(params: ModelParams, stickiness: float) -> ModelParams:
    """Shift velocity mass towards keeping the previous speed and heading.

    Each speed row becomes ``(1 - k) * row + k * e_prev`` and each heading
    row gains ``k`` on the zero offset.  Structural zeros stay zero.
    """
    if not 0.0 <= stickiness <= 1.0:
        raise ValueError(f"stickiness must lie in [0, 1], got {stickiness}")
    if stickiness == 0.0:
        return params
    nsp, nh = params.n_speeds, params.n_headings
    speed = (1 - stickiness) * params.speed_trans + stickiness * np.eye(nsp)
    heading = (1 - stickiness) * params.heading_trans
    heading[:, nh // 2] += stickiness
    speed = np.where(params.speed_trans > 0, speed, 0.0)
    heading = np.where(params.heading_trans > 0, heading, 0.0)
    speed /= speed.sum(axis=-1, keepdims=True)
    heading /= heading.sum(axis=-1, keepdims=True)
    return params.replace(speed_trans=speed, heading_trans=heading)


@dataclass
class LabeledTrace:
    frames: list[Frame]
    states: np.ndarray
    envs: np.ndarray

    @property
    def spans(self) -> list[LabelSpan]:
        return spans_from_labels(self.states, self.envs)

    def __len__(self) -> int:
        return len(self.frames)


def as_labeled(trace) -> LabeledTrace:
    return LabeledTrace(list(trace.frames), np.asarray(trace.states), np.asarray(trace.envs))


def schedule_for(kind: ModelKind, trace: LabeledTrace, ve_kind: ScheduleKind, percent: float = 0.0, rng=None) -> VeSchedule:
    """Drop labels and expand what remains, in the variant's own label space.

    ``percent=None`` with an ``rng`` keeps one random frame per span.
    """
    s, e = kind.relabel(trace.states, trace.envs)
    spans = spans_from_labels(s, e)
    if percent is None:
        spans = random_single_frame(spans, rng)
    elif percent > 0:
        spans = drop_labels(spans, percent)
    return expand_annotations(spans, len(trace), ve_kind)


# ---------------------------------------------------------------------------
# Training and decoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """How each variant is fitted.

    Collapsed variants use exact inference.  The spatial variants learn the
    activity and observation tables by label counting and the velocity
    tables by ``velocity_em_iters`` EM passes over the beam lattice,
    starting from a velocity prior with ``motion_stickiness`` persistence.
    """

    em: EmConfig = EmConfig()
    train_beam: BeamConfig = BeamConfig(max_states=500)
    decode_beam: BeamConfig = BeamConfig(max_states=1000)
    velocity_em_iters: int = 1
    motion_stickiness: float = 0.5
    seed: int = 0


def train_model(
    kind: ModelKind,
    traces: Sequence[LabeledTrace],
    bmap: BuildingMap,
    config: TrainConfig = TrainConfig(),
    ve_kind: ScheduleKind = ScheduleKind.HARD_LABELS,
    percent: float = 0.0,
) -> ModelParams:
    world = kind.world(bmap)
    init = kind.init_params(bmap, config.seed, stickiness=config.motion_stickiness)
    data = [(t.frames, schedule_for(kind, t, ve_kind, percent)) for t in traces]
    if kind.collapsed:
        em = EmConfig(config.em.max_iters, config.em.rel_ll_tolerance, config.em.dirichlet_smoothing, BeamConfig(exact_mode=True))
        if ve_kind is ScheduleKind.HARD_LABELS:
            em = EmConfig(1, em.rel_ll_tolerance, em.dirichlet_smoothing, em.beam)
        return em_train(data, init, world, em, kind.factors).params
    em = EmConfig(config.velocity_em_iters, config.em.rel_ll_tolerance, config.em.dirichlet_smoothing, config.train_beam)
    return em_train(data, init, world, em, kind.factors).params


def decode(kind: ModelKind, params: ModelParams, frames: Sequence[Frame], bmap: BuildingMap, beam: BeamConfig) -> ViterbiResult:
    if kind.collapsed:
        beam = BeamConfig(exact_mode=True)
    return viterbi_decode(frames, params, kind.world(bmap), beam, None, kind.factors)


def adaboost_argmax(frames: Sequence[Frame]) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame winning detector; ties go to the lowest class index."""
    sb = np.array([f.msb.state_bins for f in frames])
    eb = np.array([f.msb.env_bins for f in frames])
    return sb.argmax(axis=1), eb.argmax(axis=1)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class Accuracy:
    per_trace: np.ndarray
    mean: float
    ci95: float

    def to_row(self) -> dict:
        return {"mean": self.mean, "ci95": self.ci95}


def accuracy_summary(per_trace: Sequence[float]) -> Accuracy:
    """Mean and normal-approximation 95% half-width across traces."""
    a = np.asarray(per_trace, dtype=float)
    if a.size == 0:
        raise ValueError("no traces to summarize")
    sd = float(np.std(a, ddof=1)) if a.size > 1 else 0.0
    return Accuracy(a, float(a.mean()), 1.96 * sd / math.sqrt(a.size))


def evaluate_accuracy(decoded: Sequence[Sequence[int]], truth: Sequence[Sequence[int]]) -> Accuracy:
    """Frame accuracy of one variable per trace, summarized across traces."""
    if len(decoded) != len(truth):
        raise ValueError(f"{len(decoded)} decoded traces but {len(truth)} ground-truth traces")
    per = []
    for i, (d, t) in enumerate(zip(decoded, truth)):
        d, t = np.asarray(d), np.asarray(t)
        if d.shape != t.shape:
            raise ValueError(f"trace {i}: decoded length {d.size} differs from truth length {t.size}")
        per.append(float(np.mean(d == t)))
    return accuracy_summary(per)


def forbidden_frames(states: Sequence[int], envs: Sequence[int]) -> int:
    return int(np.sum(~ADMISSIBLE[np.asarray(states), np.asarray(envs)]))


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_ROWS = ("adaboost", "single-msb", "joint-msb", "joint-msb-gps", "full")


@dataclass
class AblationResult:
    rows: dict[str, tuple[Accuracy, Accuracy]]  # row -> (state accuracy, env accuracy)
    decoded: dict[str, list[tuple[np.ndarray, np.ndarray]]] = field(default_factory=dict)
    cells: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "state_mean", "state_ci95", "env_mean", "env_ci95"])
        for name, (sa, ea) in self.rows.items():
            w.writerow([name, f"{sa.mean:.6f}", f"{sa.ci95:.6f}", f"{ea.mean:.6f}", f"{ea.ci95:.6f}"])
        return buf.getvalue()


def _fold_params(init: ModelParams, counts: Sequence[ExpectedCounts], held_out: int, alpha: float) -> ModelParams:
    total = None
    for i, c in enumerate(counts):
        if i != held_out:
            total = c if total is None else total + c
    return m_step(init, total, alpha)


def run_ablation(
    traces: Sequence[LabeledTrace],
    bmap: BuildingMap,
    config: TrainConfig = TrainConfig(),
    rows: Sequence[str] = ABLATION_ROWS,
) -> AblationResult:
    """Leave-one-out cross-validation of every requested row.

    Training statistics that do not depend on the fold (label counts, and the
    first EM pass from the shared initial parameters) are computed once per
    trace and summed per fold, which gives exactly the parameters a per-fold
    ``em_train`` would produce.
    """
    n = len(traces)
    if n < 2:
        raise ValueError("leave-one-out needs at least two traces")
    unknown = set(rows) - set(ABLATION_ROWS)
    if unknown:
        raise ValueError(f"unknown ablation rows {sorted(unknown)}")
    alpha = config.em.dirichlet_smoothing
    truth_s = [t.states for t in traces]
    truth_e = [t.envs for t in traces]
    out: dict[str, tuple[Accuracy, Accuracy]] = {}
    decoded: dict[str, list] = {}
    cells: dict[str, list] = {}

    def per_trace_counts(kind: ModelKind, beam: BeamConfig, params: ModelParams) -> list[ExpectedCounts]:
        world = kind.world(bmap)
        return [
            e_step([(t.frames, schedule_for(kind, t, ScheduleKind.HARD_LABELS))], params, world, beam, kind.factors)
            for t in traces
        ]

    def loo(kind: ModelKind, iters: int, beam: BeamConfig):
        init = kind.init_params(bmap, config.seed, stickiness=config.motion_stickiness)
        first = per_trace_counts(kind, beam, init)
        fold_params = [_fold_params(init, first, i, alpha) for i in range(n)]
        for _ in range(iters - 1):
            world = kind.world(bmap)
            for i in range(n):
                data = [(t.frames, schedule_for(kind, t, ScheduleKind.HARD_LABELS)) for j, t in enumerate(traces) if j != i]
                counts = e_step(data, fold_params[i], world, beam, kind.factors)
                fold_params[i] = m_step(fold_params[i], counts, alpha)
        return fold_params

    if "adaboost" in rows:
        preds = [adaboost_argmax(t.frames) for t in traces]
        decoded["adaboost"] = preds
        out["adaboost"] = (
            evaluate_accuracy([p[0] for p in preds], truth_s),
            evaluate_accuracy([p[1] for p in preds], truth_e),
        )
    exact = BeamConfig(exact_mode=True)
    if "single-msb" in rows:
        sp = loo(ModelKind.STATE_MSB, 1, exact)
        ep = loo(ModelKind.ENV_MSB, 1, exact)
        ds = [decode(ModelKind.STATE_MSB, sp[i], traces[i].frames, bmap, exact).states for i in range(n)]
        de = [decode(ModelKind.ENV_MSB, ep[i], traces[i].frames, bmap, exact).envs for i in range(n)]
        decoded["single-msb"] = list(zip(ds, de))
        out["single-msb"] = (evaluate_accuracy(ds, truth_s), evaluate_accuracy(de, truth_e))
    if "joint-msb" in rows:
        jp = loo(ModelKind.JOINT_MSB, 1, exact)
        res = [decode(ModelKind.JOINT_MSB, jp[i], traces[i].frames, bmap, exact) for i in range(n)]
        decoded["joint-msb"] = [(r.states, r.envs) for r in res]
        out["joint-msb"] = (evaluate_accuracy([r.states for r in res], truth_s), evaluate_accuracy([r.envs for r in res], truth_e))
    spatial = [r for r in ("joint-msb-gps", "full") if r in rows]
    if spatial:
        # both spatial rows share one fit; they differ only in the map factor at decode time
        fp = loo(ModelKind.FULL, config.velocity_em_iters, config.train_beam)
        for name in spatial:
            kind = ModelKind.FULL if name == "full" else ModelKind.JOINT_MSB_GPS
            res = [decode(kind, fp[i], traces[i].frames, bmap, config.decode_beam) for i in range(n)]
            decoded[name] = [(r.states, r.envs) for r in res]
            cells[name] = [np.array([(j.location.x_cell, j.location.y_cell) for j in r.path]) for r in res]
            out[name] = (evaluate_accuracy([r.states for r in res], truth_s), evaluate_accuracy([r.envs for r in res], truth_e))
    ordered = {r: out[r] for r in ABLATION_ROWS if r in out}
    return AblationResult(ordered, decoded, cells)


# ---------------------------------------------------------------------------
# Virtual-evidence curve
# ---------------------------------------------------------------------------

@dataclass
class VeCurveRow:
    kind: str
    percent: str
    state: Accuracy
    env: Accuracy
    decoded: list = field(default_factory=list, repr=False)  # (states, envs) per held-out trace


def run_ve_experiment(
    traces: Sequence[LabeledTrace],
    bmap: BuildingMap,
    percentages: Sequence[float],
    kinds: Sequence[ScheduleKind],
    repeats: int = 0,
    config: TrainConfig = TrainConfig(),
    model: ModelKind = ModelKind.JOINT_MSB,
    seed: int = 0,
) -> list[VeCurveRow]:
    """Leave-one-out accuracy after training on partially labeled traces.

    ``repeats > 0`` adds the random-single-frame variant (two-way schedule),
    one cross-validation run per repeat, summarized across repeats.
    """
    n = len(traces)
    rows = []
    em = EmConfig(config.em.max_iters, config.em.rel_ll_tolerance, config.em.dirichlet_smoothing,
                  BeamConfig(exact_mode=True) if model.collapsed else config.train_beam)
    world = model.world(bmap)
    init = model.init_params(bmap, config.seed, stickiness=config.motion_stickiness)

    def cv(schedules):
        ds, de = [], []
        for i in range(n):
            data = [(traces[j].frames, schedules[j]) for j in range(n) if j != i]
            params = em_train(data, init, world, em, model.factors).params
            r = decode(model, params, traces[i].frames, bmap, config.decode_beam)
            ds.append(r.states)
            de.append(r.envs)
        return ds, de

    truth_s = [t.states for t in traces]
    truth_e = [t.envs for t in traces]
    for kind in kinds:
        for p in percentages:
            scheds = [schedule_for(model, t, kind, p) for t in traces]
            ds, de = cv(scheds)
            rows.append(VeCurveRow(kind.value, f"{p:g}", evaluate_accuracy(ds, truth_s), evaluate_accuracy(de, truth_e),
                                   list(zip(ds, de))))
    if repeats > 0:
        rng = np.random.default_rng(seed)
        means_s, means_e, paths = [], [], []
        for _ in range(repeats):
            scheds = [schedule_for(model, t, ScheduleKind.TWO_WAY_UNIFORM, None, rng) for t in traces]
            ds, de = cv(scheds)
            means_s.append(evaluate_accuracy(ds, truth_s).mean)
            means_e.append(evaluate_accuracy(de, truth_e).mean)
            paths.extend(zip(ds, de))
        rows.append(VeCurveRow("random-single-frame", "100", accuracy_summary(means_s), accuracy_summary(means_e), paths))
    return rows


def ve_rows_to_csv(rows: Sequence[VeCurveRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "percent", "state_mean", "state_ci95", "env_mean", "env_ci95"])
    for r in rows:
        w.writerow([r.kind, r.percent, f"{r.state.mean:.6f}", f"{r.state.ci95:.6f}", f"{r.env.mean:.6f}", f"{r.env.ci95:.6f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Decoded-path output
# ---------------------------------------------------------------------------

DECODED_COLUMNS = ["frame", "x", "y", "speed_bin", "heading_bin", "state", "env"]


def decoded_to_csv(path: Sequence[JointState]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DECODED_COLUMNS)
    for k, j in enumerate(path):
        w.writerow([k, j.location.x_cell, j.location.y_cell, j.velocity.speed_bin, j.velocity.heading_bin, j.state.name, j.env.name])
    return buf.getvalue()


def read_decoded_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(cells (K, 2), states, envs) from a decoded-path CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DECODED_COLUMNS:
            raise ParseError(f"{path}: expected columns {DECODED_COLUMNS}, got {reader.fieldnames}")
        cells, states, envs = [], [], []
        for lineno, row in enumerate(reader, 2):
            try:
                cells.append((int(row["x"]), int(row["y"])))
                states.append(int(MotionState[row["state"]]))
                envs.append(int(Environment[row["env"]]))
            except (KeyError, ValueError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return np.array(cells, dtype=int).reshape(-1, 2), np.array(states, dtype=int), np.array(envs, dtype=int)


def emit_trace_plot(cells: np.ndarray, envs: Sequence[int], states: Sequence[int], frames: Sequence[Frame], bmap: BuildingMap, scale: float = 4.0) -> tuple[str, str]:
    """SVG drawing plus per-frame CSV of a decoded path against the GPS fixes.

    Decoded segments inside a building are drawn thick and dashed, segments
    outside thin and solid; the style changes exactly where the decoded
    environment changes.  GPS fixes form a polyline with a marker per fix.
    """
    cells = np.asarray(cells).reshape(-1, 2)
    envs = np.asarray(envs)
    states = np.asarray(states)
    if not (len(cells) == len(envs) == len(states) == len(frames)):
        raise ValueError("path, labels and frames must have the same length")
    W, H = bmap.width * scale, bmap.height * scale

    def px(x, y):
        return f"{x * scale:.2f},{H - y * scale:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" viewBox="0 0 {W:.0f} {H:.0f}">',
        f'<rect x="0" y="0" width="{W:.0f}" height="{H:.0f}" fill="white" stroke="black"/>',
    ]
    for b in bmap.buildings:
        parts.append(
            f'<rect class="building" x="{b.min_x * scale:.2f}" y="{H - b.max_y * scale:.2f}" '
            f'width="{(b.max_x - b.min_x) * scale:.2f}" height="{(b.max_y - b.min_y) * scale:.2f}" fill="#ddd" stroke="#555"/>'
        )
    gps = [(f.gps.x_m, f.gps.y_m) for f in frames if f.gps is not None]
    if gps:
        parts.append('<polyline class="gps" fill="none" stroke="#c33" stroke-width="1" points="' + " ".join(px(x, y) for x, y in gps) + '"/>')
        for x, y in gps:
            cx, cy = px(x, y).split(",")
            parts.append(f'<circle class="fix" cx="{cx}" cy="{cy}" r="2" fill="#c33"/>')
    inside = envs == int(Environment.INDOORS)
    start = 0
    for k in range(1, len(cells) + 1):
        if k == len(cells) or inside[k] != inside[start]:
            seg = cells[start : min(k + 1, len(cells))]
            pts = " ".join(px(x + 0.5, y + 0.5) for x, y in seg)
            if inside[start]:
                style = 'class="path-inside" stroke="#236" stroke-width="4" stroke-dasharray="6,3"'
            else:
                style = 'class="path-outside" stroke="#236" stroke-width="1.5"'
            parts.append(f'<polyline {style} fill="none" points="{pts}"/>')
            start = k
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "x", "y", "state", "env", "gps_x", "gps_y"])
    for k, f in enumerate(frames):
        gx = f"{f.gps.x_m:.3f}" if f.gps is not None else ""
        gy = f"{f.gps.y_m:.3f}" if f.gps is not None else ""
        w.writerow([k, f"{cells[k][0] + 0.5:.1f}", f"{cells[k][1] + 0.5:.1f}", MotionState(int(states[k])).name, Environment(int(envs[k])).name, gx, gy])
    return svg, buf.getvalue()


def indoor_outside_fraction(cells: np.ndarray, envs: Sequence[int], bmap: BuildingMap) -> float:
    """Fraction of frames decoded as indoors whose cell lies outside every building."""
    cells = np.asarray(cells).reshape(-1, 2)
    envs = np.asarray(envs)
    indoor = envs == int(Environment.INDOORS)
    outside = ~bmap.inside_mask[cells[:, 0], cells[:, 1]]
    return float(np.mean(indoor & outside)) if len(envs) else 0.0


def labels_from_spans(spans: Sequence[LabelSpan], n_frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame labels from spans that must cover every frame."""
    states = np.full(n_frames, -1, dtype=int)
    envs = np.full(n_frames, -1, dtype=int)
    for s in spans:
        if s.end_frame >= n_frames:
            raise ValueError(f"span {s} runs past the {n_frames}-frame trace")
        states[s.start_frame : s.end_frame + 1] = int(s.state)
        envs[s.start_frame : s.end_frame + 1] = int(s.env)
    gaps = np.flatnonzero(states < 0)
    if gaps.size:
        raise ValueError(f"frame {gaps[0]} has no label")
    return states, envs
