"""EM training over partially labeled traces with virtual-evidence schedules.

A label span says "these frames were (state, env)".  Between spans the
schedule decides how much the missing frames are constrained: not at all
(``ALL_UNIFORM``), to one of the two flanking labels (``TWO_WAY_UNIFORM``),
or to a linear blend of them (``LINEAR_FADE``).  The schedule is a per-frame
non-negative score table multiplied into the lattice; it is never
normalized.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .factors import ALL_FACTORS, Factors
from .inference import BeamConfig, ExpectedCounts, InferenceCollapse, forward_backward
from .model import (
    ADMISSIBLE,
    N_BINS,
    N_ENVS,
    N_HEADINGS,
    N_SPEED_GROUPS,
    N_STATES,
    SPEED_BINS,
    BuildingMap,
    Environment,
    Frame,
    LabelSpan,
    ModelParams,
    MotionState,
    ParseError,
    check_spans,
    default_map_cpt,
    structural_masks,
)


class ScheduleKind(Enum):
    HARD_LABELS = "hard"
    LINEAR_FADE = "linear"
    TWO_WAY_UNIFORM = "two-way"
    ALL_UNIFORM = "all-uniform"


@dataclass(frozen=True, eq=False)
class VeSchedule:
    """Per-frame score over (state, env); shape (frames, |S|, |E|)."""

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 3 or t.shape[1:] != (N_STATES, N_ENVS):
            raise ValueError(f"schedule table has shape {t.shape}, expected (frames, {N_STATES}, {N_ENVS})")
        if (t < 0).any() or not np.isfinite(t).all():
            raise ValueError("schedule scores must be finite and non-negative")
        dead = ~((t * ADMISSIBLE).max(axis=(1, 2)) > 0)
        if dead.any():
            raise ValueError(f"frame {int(np.argmax(dead))} gives zero score to every admissible pair")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    def __len__(self) -> int:
        return self.table.shape[0]


def expand_annotations(spans: Sequence[LabelSpan], trace_len: int, kind: ScheduleKind) -> VeSchedule:
    """Turn label spans into a virtual-evidence schedule.

    Frames before the first span or after the last have only one neighbouring
    label; the fade-style kinds then put full score on that label alone.
    """
    spans = check_spans(spans)
    if trace_len < 1:
        raise ValueError("trace_len must be >= 1")
    if spans and spans[-1].end_frame >= trace_len:
        raise ValueError(f"span ends at frame {spans[-1].end_frame} but the trace has {trace_len} frames")
    table = np.zeros((trace_len, N_STATES, N_ENVS))
    if kind is ScheduleKind.ALL_UNIFORM:
        table[:] = ADMISSIBLE
    elif not spans:
        raise ValueError(f"{kind.value} schedule needs at least one label span")
    for sp in spans:
        table[sp.start_frame : sp.end_frame + 1] = 0.0
        table[sp.start_frame : sp.end_frame + 1, sp.state, sp.env] = 1.0
    if kind is ScheduleKind.ALL_UNIFORM:
        return VeSchedule(table)

    def gap_error(lo, hi):
        raise ValueError(f"hard labels leave frames {lo}..{hi} unlabeled")

    first, last = spans[0], spans[-1]
    if first.start_frame > 0:
        if kind is ScheduleKind.HARD_LABELS:
            gap_error(0, first.start_frame - 1)
        table[: first.start_frame, first.state, first.env] = 1.0
    if last.end_frame < trace_len - 1:
        if kind is ScheduleKind.HARD_LABELS:
            gap_error(last.end_frame + 1, trace_len - 1)
        table[last.end_frame + 1 :, last.state, last.env] = 1.0
    for a, b in zip(spans, spans[1:]):
        k1, k2 = a.end_frame, b.start_frame
        if k2 == k1 + 1:
            continue
        if kind is ScheduleKind.HARD_LABELS:
            gap_error(k1 + 1, k2 - 1)
        ks = np.arange(k1 + 1, k2)
        if kind is ScheduleKind.TWO_WAY_UNIFORM:
            table[ks, a.state, a.env] = 1.0
            table[ks, b.state, b.env] = 1.0
        else:
            table[ks, a.state, a.env] += (k2 - ks) / (k2 - k1)
            table[ks, b.state, b.env] += (ks - k1) / (k2 - k1)
    return VeSchedule(table)


def drop_labels(spans: Sequence[LabelSpan], percent: float) -> list[LabelSpan]:
    """Trim every span symmetrically, keeping its central ``100 - percent`` %.

    At least one frame always survives; when the trimmed count is odd the
    kept block sits one frame towards the start.
    """
    if not 0 <= percent <= 100:
        raise ValueError("percent must lie in [0, 100]")
    frac = (100 - Fraction(percent)) / 100
    out = []
    for sp in check_spans(spans):
        keep = max(1, math.ceil(sp.length * frac))
        start = sp.start_frame + (sp.length - keep) // 2
        out.append(LabelSpan(start, start + keep - 1, sp.state, sp.env))
    return out


def random_single_frame(spans: Sequence[LabelSpan], rng: np.random.Generator) -> list[LabelSpan]:
    """Keep one uniformly chosen frame of every span."""
    out = []
    for sp in check_spans(spans):
        k = int(rng.integers(sp.start_frame, sp.end_frame + 1))
        out.append(LabelSpan(k, k, sp.state, sp.env))
    return out


def save_annotations(spans: Sequence[LabelSpan], path) -> None:
    data = [{"start": s.start_frame, "end": s.end_frame, "state": s.state.name, "env": s.env.name} for s in spans]
    Path(path).write_text(json.dumps(data, indent=1))


def load_annotations(path) -> list[LabelSpan]:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, list):
        raise ParseError(f"{path}: annotations must be a JSON list")
    spans = []
    for i, item in enumerate(data):
        try:
            spans.append(
                LabelSpan(int(item["start"]), int(item["end"]), MotionState[item["state"]], Environment[item["env"]])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: span {i}: {exc}") from exc
    return check_spans(spans)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _normalize_rows(arr: np.ndarray) -> np.ndarray:
    return arr / arr.sum(axis=-1, keepdims=True)


def initialize_params(
    seed: int,
    width: int,
    height: int,
    speed_bins: Sequence[float] = SPEED_BINS,
    n_headings: int = N_HEADINGS,
    pairs: np.ndarray = ADMISSIBLE,
    jitter: float = 0.01,
    map_cpt: Optional[np.ndarray] = None,
    gps_exponent: float = 0.5,
) -> ModelParams:
    """Near-uniform starting point for EM; zeros exactly where structure demands."""
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    rng = np.random.default_rng(seed)
    pairs = np.asarray(pairs, dtype=bool)
    masks = structural_masks(pairs)
    nsp = len(speed_bins)

    def draw(mask):
        mask = np.asarray(mask, dtype=bool)
        raw = (1.0 + rng.uniform(0.0, jitter, mask.shape)) * mask
        return _normalize_rows(raw)

    env_mask = masks["env"]
    return ModelParams(
        env_trans=draw(masks["env_trans"]),
        state_trans=draw(masks["state_trans"]),
        heading_trans=draw(np.ones((N_STATES, n_headings))),
        speed_trans=draw(np.ones((N_SPEED_GROUPS, nsp, nsp))),
        obs_state=draw(np.ones((N_STATES, N_STATES, N_BINS))),
        obs_env=draw(np.ones((N_ENVS, N_ENVS, N_BINS))),
        map_cpt=default_map_cpt() if map_cpt is None else map_cpt,
        init_env=draw(env_mask),
        init_state=draw(masks["init_state"]),
        init_speed=draw(np.ones(nsp)),
        init_heading=draw(np.ones(n_headings)),
        init_location=np.full((width, height), 1.0 / (width * height)),
        gps_exponent=gps_exponent,
        speed_bins=tuple(speed_bins),
        pairs=pairs,
    )


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 50
    rel_ll_tolerance: float = 1e-5
    dirichlet_smoothing: float = 0.1
    beam: BeamConfig = BeamConfig()

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_ll_tolerance > 0:
            raise ValueError("rel_ll_tolerance must be positive")
        if self.dirichlet_smoothing < 0:
            raise ValueError("dirichlet_smoothing must be >= 0")


@dataclass
class EmResult:
    params: ModelParams
    ll_trajectory: list[float]
    report: list[dict] = field(default_factory=list)
    converged: bool = False

    def report_json(self) -> str:
        return json.dumps({"converged": self.converged, "iterations": self.report}, indent=1)


class TraceCollapse(RuntimeError):
    def __init__(self, trace: int, frame: int):
        self.trace, self.frame = trace, frame
        super().__init__(f"inference collapsed on trace {trace} at frame {frame}")


def _reestimate(old: np.ndarray, counts: np.ndarray, mask: np.ndarray, alpha: float) -> np.ndarray:
    """Smoothed row normalization; rows with no expected counts keep their old value."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), old.shape)
    counts = np.where(mask, counts, 0.0)
    raw = counts + alpha * mask
    sums = raw.sum(axis=-1, keepdims=True)
    empty = counts.sum(axis=-1, keepdims=True) <= 0
    safe = np.where(sums > 0, sums, 1.0)
    return np.where(empty, old, raw / safe)


def m_step(params: ModelParams, counts: ExpectedCounts, alpha: float) -> ModelParams:
    masks = structural_masks(params.pairs)
    env_mask = masks["env"]
    return params.replace(
        env_trans=_reestimate(params.env_trans, counts.env_trans, masks["env_trans"], alpha),
        state_trans=_reestimate(params.state_trans, counts.state_trans, masks["state_trans"], alpha),
        heading_trans=_reestimate(params.heading_trans, counts.heading_trans, True, alpha),
        speed_trans=_reestimate(params.speed_trans, counts.speed_trans, True, alpha),
        obs_state=_reestimate(params.obs_state, counts.obs_state, True, alpha),
        obs_env=_reestimate(params.obs_env, counts.obs_env, True, alpha),
        init_env=_reestimate(params.init_env, counts.init_env, env_mask, alpha),
        init_state=_reestimate(params.init_state, counts.init_state, masks["init_state"], alpha),
        init_speed=_reestimate(params.init_speed, counts.init_speed, True, alpha),
        init_heading=_reestimate(params.init_heading, counts.init_heading, True, alpha),
    )


def e_step(
    traces: Sequence[tuple[Sequence[Frame], Optional[VeSchedule]]],
    params: ModelParams,
    bmap: BuildingMap,
    beam: BeamConfig,
    factors: Factors = ALL_FACTORS,
) -> ExpectedCounts:
    total = ExpectedCounts.zeros(params.n_speeds, params.n_headings)
    for t, (frames, ve) in enumerate(traces):
        try:
            res = forward_backward(frames, params, bmap, beam, ve, factors, keep_posteriors=False)
        except InferenceCollapse as exc:
            raise TraceCollapse(t, exc.frame) from exc
        total = total + res.counts
    return total


def em_train(
    traces: Sequence[tuple[Sequence[Frame], Optional[VeSchedule]]],
    init: ModelParams,
    bmap: BuildingMap,
    config: EmConfig = EmConfig(),
    factors: Factors = ALL_FACTORS,
) -> EmResult:
    """Alternate E- and M-steps until the relative LL gain drops below tolerance.

    ``ll_trajectory[i]`` is the training log-likelihood (including the
    virtual-evidence factor) of the parameters entering iteration ``i``.
    """
    if not traces:
        raise ValueError("need at least one training trace")
    params = init
    trajectory: list[float] = []
    report: list[dict] = []
    converged = False
    for it in range(config.max_iters):
        t0 = time.perf_counter()
        counts = e_step(traces, params, bmap, config.beam, factors)
        ll = counts.log_likelihood
        trajectory.append(ll)
        params = m_step(params, counts, config.dirichlet_smoothing)
        report.append({"iteration": it, "log_likelihood": ll, "seconds": time.perf_counter() - t0})
        if it > 0:
            prev = trajectory[-2]
            if (ll - prev) / max(abs(prev), 1e-300) < config.rel_ll_tolerance:
                converged = True
                break
    return EmResult(params, trajectory, report, converged)


def supervised_counts(
    labels: Sequence[tuple[np.ndarray, np.ndarray]],
    frames_list: Sequence[Sequence[Frame]],
    n_speeds: int = 1,
    n_headings: int = 1,
) -> ExpectedCounts:
    """Plain label counting for the (state, env) and observation tables."""
    c = ExpectedCounts.zeros(n_speeds, n_headings)
    for (states, envs), frames in zip(labels, frames_list):
        states = np.asarray(states)
        envs = np.asarray(envs)
        c.init_env[envs[0]] += 1
        c.init_state[envs[0], states[0]] += 1
        np.add.at(c.env_trans, (envs[:-1], envs[1:]), 1)
        np.add.at(c.state_trans, (states[:-1], envs[1:], states[1:]), 1)
        for k, f in enumerate(frames):
            for i, b in enumerate(f.msb.state_bins):
                c.obs_state[i, states[k], b - 1] += 1
            for i, b in enumerate(f.msb.env_bins):
                c.obs_env[i, envs[k], b - 1] += 1
    return c
