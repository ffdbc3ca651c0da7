"""Beam-pruned inference over the joint (location, velocity, state, environment) lattice.

The DBN's slice structure is fixed, so the forward recursion is written out
by hand rather than through a generic junction tree.  One frame step is
factored into three stages, each a small dense contraction:

1. (state, env) transition, grouped by (location, velocity);
2. location move, the bilinear landing cells of the *previous* velocity;
3. velocity transition, separable into heading then speed, per landing cell.

Observation factors (sensor board, GPS, map, virtual evidence) then
multiply in, the candidates are pruned, and the survivors renormalized.

Retained states are kept as sorted integer keys whose order is the
lexicographic order on (x, y, speed, heading, state, env), so sorting by
key is the deterministic tie-break order.

Worlds with a single cell and a single velocity (the collapsed HMMs used
by the ablations and the label-dropping experiments) go through a dense
backend with identical semantics and much lower per-frame overhead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numba
import numpy as np

from .factors import (
    ALL_FACTORS,
    Factors,
    displacement_stencil,
    gps_log_cells,
    heading_matrix,
    heading_offset_index,
    msb_log_table,
)
from .model import (
    N_BINS,
    N_ENVS,
    N_SPEED_GROUPS,
    N_STATES,
    SPEED_GROUP,
    BuildingMap,
    Environment,
    Frame,
    GridLocation,
    JointState,
    ModelParams,
    MotionState,
    PolarVelocity,
    env_class,
)


class InferenceCollapse(RuntimeError):
    """Every candidate state at some frame has zero probability."""

    def __init__(self, frame: int, detail: str = ""):
        self.frame = frame
        msg = f"inference collapsed at frame {frame}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


@dataclass(frozen=True)
class BeamConfig:
    max_states: int = 10_000
    log_threshold: float = 12.0
    exact_mode: bool = False

    def __post_init__(self):
        if self.max_states < 1:
            raise ValueError("max_states must be >= 1")
        if not self.log_threshold >= 0:
            raise ValueError("log_threshold must be >= 0")


EXACT = BeamConfig(exact_mode=True)


class StateCodec:
    """Bijection between admissible joint states and sortable integer keys."""

    def __init__(self, width: int, height: int, n_speeds: int, n_headings: int, pairs: np.ndarray):
        self.width, self.height = width, height
        self.n_speeds, self.n_headings = n_speeds, n_headings
        self.n_vel = n_speeds * n_headings
        ps, pe = np.nonzero(np.asarray(pairs, dtype=bool))
        self.pair_state, self.pair_env = ps, pe
        self.n_pairs = len(ps)
        self._pair_index = -np.ones((N_STATES, N_ENVS), dtype=np.int64)
        self._pair_index[ps, pe] = np.arange(self.n_pairs)
        self.n_keys = width * height * self.n_vel * self.n_pairs

    def pair_index(self, state, env) -> int:
        return int(self._pair_index[state, env])

    def encode(self, js: JointState) -> int:
        p = self.pair_index(js.state, js.env)
        if p < 0:
            raise ValueError(f"({js.state.name}, {js.env.name}) is not admissible in this model")
        loc = js.location.x_cell * self.height + js.location.y_cell
        v = js.velocity.speed_bin * self.n_headings + js.velocity.heading_bin
        return (loc * self.n_vel + v) * self.n_pairs + p

    def split(self, keys):
        keys = np.asarray(keys)
        p = keys % self.n_pairs
        lv = keys // self.n_pairs
        return lv // self.n_vel, lv % self.n_vel, p

    def decode(self, key: int) -> JointState:
        loc, v, p = (int(a) for a in self.split(key))
        return JointState(
            GridLocation(loc // self.height, loc % self.height),
            PolarVelocity(v // self.n_headings, v % self.n_headings),
            MotionState(int(self.pair_state[p])),
            Environment(int(self.pair_env[p])),
        )


@dataclass
class FramePosterior:
    """Sparse distribution over the joint states retained at one frame."""

    codec: StateCodec = field(repr=False)
    keys: np.ndarray
    probs: np.ndarray
    log_normalizer: float

    def __len__(self) -> int:
        return len(self.keys)

    def to_dict(self) -> dict[JointState, float]:
        return {self.codec.decode(int(k)): float(p) for k, p in zip(self.keys, self.probs)}

    def pair_marginal(self) -> np.ndarray:
        out = np.zeros((N_STATES, N_ENVS))
        _, _, p = self.codec.split(self.keys)
        np.add.at(out, (self.codec.pair_state[p], self.codec.pair_env[p]), self.probs)
        return out

    def state_marginal(self) -> np.ndarray:
        return self.pair_marginal().sum(axis=1)

    def env_marginal(self) -> np.ndarray:
        return self.pair_marginal().sum(axis=0)

    def location_marginal(self) -> np.ndarray:
        out = np.zeros(self.codec.width * self.codec.height)
        loc, _, _ = self.codec.split(self.keys)
        np.add.at(out, loc, self.probs)
        return out.reshape(self.codec.width, self.codec.height)

    def map_state(self) -> JointState:
        return self.codec.decode(int(self.keys[int(np.argmax(self.probs))]))


@dataclass
class ExpectedCounts:
    """Expected sufficient statistics for every learnable table."""

    init_env: np.ndarray
    init_state: np.ndarray
    init_speed: np.ndarray
    init_heading: np.ndarray
    env_trans: np.ndarray
    state_trans: np.ndarray
    heading_trans: np.ndarray
    speed_trans: np.ndarray
    obs_state: np.ndarray
    obs_env: np.ndarray
    log_likelihood: float = 0.0
    n_frames: int = 0

    @classmethod
    def zeros(cls, n_speeds: int, n_headings: int) -> "ExpectedCounts":
        return cls(
            np.zeros(N_ENVS),
            np.zeros((N_ENVS, N_STATES)),
            np.zeros(n_speeds),
            np.zeros(n_headings),
            np.zeros((N_ENVS, N_ENVS)),
            np.zeros((N_STATES, N_ENVS, N_STATES)),
            np.zeros((N_STATES, n_headings)),
            np.zeros((N_SPEED_GROUPS, n_speeds, n_speeds)),
            np.zeros((N_STATES, N_STATES, N_BINS)),
            np.zeros((N_ENVS, N_ENVS, N_BINS)),
        )

    _TABLES = (
        "init_env", "init_state", "init_speed", "init_heading", "env_trans",
        "state_trans", "heading_trans", "speed_trans", "obs_state", "obs_env",
    )

    def __add__(self, other: "ExpectedCounts") -> "ExpectedCounts":
        out = {name: getattr(self, name) + getattr(other, name) for name in self._TABLES}
        return ExpectedCounts(
            **out,
            log_likelihood=self.log_likelihood + other.log_likelihood,
            n_frames=self.n_frames + other.n_frames,
        )


@dataclass
class FilterResult:
    posteriors: list[FramePosterior]
    log_likelihood: float


@dataclass
class ViterbiResult:
    path: list[JointState]
    log_score: float
    keys: np.ndarray

    @property
    def states(self) -> np.ndarray:
        return np.array([int(js.state) for js in self.path])

    @property
    def envs(self) -> np.ndarray:
        return np.array([int(js.env) for js in self.path])


@dataclass
class SmoothResult:
    posteriors: list[FramePosterior]
    pair_transitions: list[np.ndarray]  # (pairs x pairs) posterior of each consecutive (s, e) step
    counts: ExpectedCounts
    log_likelihood: float
    codec: StateCodec = field(repr=False)


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------

def _select(vals: np.ndarray, beam: BeamConfig) -> np.ndarray:
    """Indices of surviving candidates; ``vals`` are linear scores in key order."""
    idx = np.flatnonzero(vals > 0)
    if beam.exact_mode or idx.size == 0:
        return idx
    v = vals[idx]
    keep = v >= v.max() * math.exp(-beam.log_threshold)
    if not keep.all():
        idx, v = idx[keep], v[keep]
    k = beam.max_states
    if idx.size > k:
        kth = np.partition(v, idx.size - k)[idx.size - k]
        mask = v > kth
        need = k - int(mask.sum())
        mask[np.flatnonzero(v == kth)[:need]] = True
        idx = idx[mask]
    return idx


def prune_arrays(keys: np.ndarray, log_scores: np.ndarray, beam: BeamConfig) -> np.ndarray:
    """Indices (in ascending key order) of entries kept by the beam."""
    keys = np.asarray(keys)
    log_scores = np.asarray(log_scores, dtype=float)
    if keys.size == 0:
        raise ValueError("nothing to prune")
    order = np.argsort(keys, kind="stable")
    s = log_scores[order]
    finite = np.isfinite(s)
    if beam.exact_mode:
        return order[finite]
    best = s[finite].max() if finite.any() else -np.inf
    if not np.isfinite(best):
        return order[:1]
    keep = finite & (s >= best - beam.log_threshold)
    cand = np.flatnonzero(keep)
    if cand.size > beam.max_states:
        v = s[cand]
        k = beam.max_states
        kth = np.partition(v, cand.size - k)[cand.size - k]
        mask = v > kth
        mask[np.flatnonzero(v == kth)[: k - int(mask.sum())]] = True
        cand = cand[mask]
    return order[cand]


def prune(scored: Mapping[JointState, float], beam: BeamConfig) -> dict[JointState, float]:
    """Drop states far below the best, then cap the count; ties go to the lower state."""
    if not scored:
        raise ValueError("nothing to prune")
    states = sorted(scored, key=JointState.sort_key)
    ranks = np.arange(len(states))
    kept = prune_arrays(ranks, np.array([scored[s] for s in states]), beam)
    return {states[i]: scored[states[i]] for i in kept}


# ---------------------------------------------------------------------------
# Compiled model
# ---------------------------------------------------------------------------

def _runs(sorted_vals: np.ndarray):
    """Distinct values of a sorted array and each element's run index."""
    flag = np.empty(len(sorted_vals), dtype=bool)
    flag[:1] = True
    np.not_equal(sorted_vals[1:], sorted_vals[:-1], out=flag[1:])
    return sorted_vals[flag], np.cumsum(flag) - 1


def _log(a) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


class _Compiled:
    """Parameter tables rearranged for the per-frame recursion."""

    def __init__(self, params: ModelParams, bmap: BuildingMap, factors: Factors):
        if params.world_shape != (bmap.width, bmap.height):
            raise ValueError(f"params cover a {params.world_shape} world, map is {bmap.width}x{bmap.height}")
        self.params, self.bmap, self.factors = params, bmap, factors
        self.W, self.H = bmap.width, bmap.height
        self.NSP, self.NH = params.n_speeds, params.n_headings
        self.NV = self.NSP * self.NH
        self.codec = StateCodec(self.W, self.H, self.NSP, self.NH, params.pairs)
        ps, pe = self.codec.pair_state, self.codec.pair_env
        self.P = self.codec.n_pairs
        self.trans = params.env_trans[pe[:, None], pe[None, :]] * params.state_trans[ps[:, None], pe[None, :], ps[None, :]]
        self.head_rows = params.heading_trans[ps]
        self.head = np.stack([heading_matrix(row) for row in self.head_rows])
        self.headT = np.ascontiguousarray(self.head.transpose(0, 2, 1))
        self.speed = params.speed_trans[np.array(SPEED_GROUP)[ps]]
        self.speedT = np.ascontiguousarray(self.speed.transpose(0, 2, 1))
        self.offsets, self.weights = displacement_stencil(params.speed_bins, self.NH)
        self.inside = bmap.inside_mask.reshape(-1)
        if factors.map:
            cls = np.array([env_class(Environment(int(e))) for e in pe])
            self.map_log = _log(params.map_cpt[cls])  # (P, map_class)
        else:
            self.map_log = np.zeros((self.P, 2))
        self.init_loc = _log(params.init_location.reshape(-1))
        self.init_pair = _log(params.init_env[pe]) + _log(params.init_state[pe, ps])
        self.init_vel = (_log(params.init_speed)[:, None] + _log(params.init_heading)[None, :]).reshape(-1)
        self.dense = self.W * self.H == 1 and self.NV == 1
        # heading offset column for every (h, h') pair
        nh = self.NH
        self.offset_idx = np.array([[heading_offset_index(h, h2, nh) for h2 in range(nh)] for h in range(nh)])

    def frame_terms(self, frames: Sequence[Frame], ve) -> np.ndarray:
        """Per-frame, per-pair log score of sensor board plus virtual evidence."""
        sb = np.array([f.msb.state_bins for f in frames])
        eb = np.array([f.msb.env_bins for f in frames])
        table = msb_log_table(sb, eb, self.params, self.factors)
        out = table[:, self.codec.pair_state, self.codec.pair_env]
        if ve is not None:
            ve = np.asarray(getattr(ve, "table", ve), dtype=float)
            if ve.shape != (len(frames), N_STATES, N_ENVS):
                raise ValueError(f"virtual evidence has shape {ve.shape}, expected ({len(frames)}, {N_STATES}, {N_ENVS})")
            if (ve < 0).any():
                raise ValueError("virtual evidence scores must be non-negative")
            out = out + _log(ve[:, self.codec.pair_state, self.codec.pair_env])
        return out

    def obs_log(self, frame: Frame, locs: np.ndarray, pair_terms: np.ndarray, pairs=None) -> np.ndarray:
        """Observation log score for each (cell, pair), shape (len(locs), len(pair_terms)).

        ``pairs`` selects which pairs ``pair_terms`` belongs to (all by default).
        """
        map_log = self.map_log if pairs is None else self.map_log[pairs]
        out = pair_terms[None, :] + map_log[:, (~self.inside[locs]).astype(int)].T
        if self.factors.gps:
            out = out + gps_log_cells(frame, locs, self.H, self.params.gps_exponent)[:, None]
        return out

    def stencil(self, g_lv: np.ndarray):
        v = g_lv % self.NV
        loc = g_lv // self.NV
        x, y = loc // self.H, loc % self.H
        off = self.offsets[v]
        dx = x[:, None] + off[..., 0]
        dy = y[:, None] + off[..., 1]
        w = self.weights[v].copy()
        ok = (w > 0) & (dx >= 0) & (dx < self.W) & (dy >= 0) & (dy < self.H)
        w[~ok] = 0.0
        tot = w.sum(axis=1)
        live = tot > 0
        w[live] /= tot[live, None]
        dest = np.where(ok, dx * self.H + dy, -1)
        return v, dest, w, ok

    def accumulate_obs(self, counts: ExpectedCounts, frames: Sequence[Frame], gamma_pairs: np.ndarray) -> None:
        """Add observation-table counts from per-frame pair posteriors (K, P)."""
        onehot_s = np.zeros((self.P, N_STATES))
        onehot_s[np.arange(self.P), self.codec.pair_state] = 1
        onehot_e = np.zeros((self.P, N_ENVS))
        onehot_e[np.arange(self.P), self.codec.pair_env] = 1
        gs = gamma_pairs @ onehot_s
        ge = gamma_pairs @ onehot_e
        sb = np.array([f.msb.state_bins for f in frames]) - 1
        eb = np.array([f.msb.env_bins for f in frames]) - 1
        eye = np.eye(N_BINS)
        for i in range(N_STATES):
            counts.obs_state[i] += gs.T @ eye[sb[:, i]]
        for i in range(N_ENVS):
            counts.obs_env[i] += ge.T @ eye[eb[:, i]]

    def accumulate_pairs(self, counts: ExpectedCounts, xi: np.ndarray) -> None:
        ps, pe = self.codec.pair_state, self.codec.pair_env
        np.add.at(counts.env_trans, (pe[:, None], pe[None, :]), xi)
        np.add.at(counts.state_trans, (ps[:, None], pe[None, :], ps[None, :]), xi)

    def accumulate_velocity(self, counts: ExpectedCounts, speed_c: np.ndarray, head_c: np.ndarray) -> None:
        """speed_c: (P, NSP, NSP), head_c: (P, NH, NH) absolute-heading counts."""
        groups = np.array(SPEED_GROUP)[self.codec.pair_state]
        np.add.at(counts.speed_trans, groups, speed_c)
        for p in range(self.P):
            s = self.codec.pair_state[p]
            counts.heading_trans[s] += np.bincount(self.offset_idx.ravel(), head_c[p].ravel(), minlength=self.NH)

    def accumulate_init(self, counts: ExpectedCounts, keys: np.ndarray, gamma: np.ndarray) -> None:
        loc, v, p = self.codec.split(keys)
        ps, pe = self.codec.pair_state[p], self.codec.pair_env[p]
        np.add.at(counts.init_env, pe, gamma)
        np.add.at(counts.init_state, (pe, ps), gamma)
        np.add.at(counts.init_speed, v // self.NH, gamma)
        np.add.at(counts.init_heading, v % self.NH, gamma)


# ---------------------------------------------------------------------------
# Lattice backend
# ---------------------------------------------------------------------------

@dataclass
class _Slice:
    keys: np.ndarray
    w: np.ndarray  # normalized forward weights (sum 1) or Viterbi scores (max 1)
    obs: np.ndarray  # exp(observation log - shift) of each retained state
    log_scale: float  # log of the normalizer removed at this frame
    total: float = 1.0  # that normalizer relative to the observation shift
    back: Optional[np.ndarray] = None  # Viterbi: predecessor index into previous slice



@numba.njit(cache=True)
def _max_velocity_kernel(Dv, rows, speed):
    Pl, L, NSP, NH = Dv.shape
    c = NH // 2
    src = np.empty((NH, NH), dtype=np.int64)
    for h2 in range(NH):
        for j in range(NH):
            src[h2, j] = (h2 - j + c) % NH
    X = np.zeros_like(Dv)
    F = np.zeros_like(Dv)
    nonzero = np.empty(NSP, dtype=np.int64)
    for p in range(Pl):
        for l in range(L):
            n = 0
            for s in range(NSP):
                for h in range(NH):
                    if Dv[p, l, s, h] != 0.0:
                        nonzero[n] = s
                        n += 1
                        break
            for i in range(n):
                s = nonzero[i]
                for h2 in range(NH):
                    best = 0.0
                    for j in range(NH):
                        v = Dv[p, l, s, src[h2, j]] * rows[p, j]
                        if v > best:
                            best = v
                    X[p, l, s, h2] = best
            if n == 0:
                continue
            for s2 in range(NSP):
                for h2 in range(NH):
                    best = 0.0
                    for i in range(n):
                        s = nonzero[i]
                        v = X[p, l, s, h2] * speed[p, s, s2]
                        if v > best:
                            best = v
                    F[p, l, s2, h2] = best
    return F, X


class _Lattice:
    def __init__(self, model: _Compiled, beam: BeamConfig):
        self.m = model
        self.beam = beam

    # -- frame 0 ------------------------------------------------------------
    def initial(self, frame: Frame, terms: np.ndarray, mode: str) -> _Slice:
        m, beam = self.m, self.beam
        locs = np.arange(m.W * m.H)
        obs12 = m.obs_log(frame, locs, terms)  # (NC, P)
        f12 = m.init_loc[:, None] + m.init_pair[None, :] + obs12
        f34 = m.init_vel
        flat12 = f12.ravel()
        c12 = np.flatnonzero(np.isfinite(flat12))
        c34 = np.flatnonzero(np.isfinite(f34))
        if c12.size == 0 or c34.size == 0:
            raise InferenceCollapse(0, "no state has positive prior and observation probability")
        if not beam.exact_mode:
            c12 = c12[_select(np.exp(flat12[c12] - flat12[c12].max()), beam)]
            c34 = c34[_select(np.exp(f34[c34] - f34[c34].max()), beam)]
        loc = c12 // m.P
        p = c12 % m.P
        keys = ((loc[:, None] * m.NV + c34[None, :]) * m.P + p[:, None]).ravel()
        score = (flat12[c12][:, None] + f34[c34][None, :]).ravel()
        obs = np.repeat(obs12.ravel()[c12], c34.size)
        order = np.argsort(keys, kind="stable")
        keys, score, obs = keys[order], score[order], obs[order]
        top = score.max()
        vals = np.exp(score - top)
        idx = _select(vals, beam)
        keys, vals, obs = keys[idx], vals[idx], obs[idx]
        obs_shift = obs.max()
        if mode == "sum":
            total = vals.sum()
            return _Slice(keys, vals / total, np.exp(obs - obs_shift), top + math.log(total))
        return _Slice(keys, vals, np.exp(obs - obs_shift), top)

    # -- shared forward stages ---------------------------------------------
    def _pairs_stage(self, keys, w, mode, live=None):
        """(state, env) transition for every retained (location, velocity) group.

        Only the ``live`` successor pairs are computed (all when ``None``).
        """
        m = self.m
        lv = keys // m.P
        p = keys % m.P
        g_lv, inv = _runs(lv)
        Pm = np.zeros((len(g_lv), m.P))
        Pm[inv, p] = w
        trans = m.trans if live is None else m.trans[:, live]
        if mode == "sum":
            return g_lv, inv, p, Pm, Pm @ trans, None
        cand = Pm[:, :, None] * trans[None, :, :]
        arg = cand.argmax(axis=1)
        return g_lv, inv, p, Pm, np.take_along_axis(cand, arg[:, None, :], axis=1)[:, 0, :], arg

    def _max_velocity(self, Dv: np.ndarray, live: np.ndarray):
        """Max-product heading then speed transition (values only).

        Returns the result and the heading-stage intermediate; back-pointers
        are recovered afterwards for the few states that survive pruning.
        """
        m = self.m
        return _max_velocity_kernel(Dv, np.ascontiguousarray(m.head_rows[live]), np.ascontiguousarray(m.speed[live]))

    def _velocity_back(self, Dv, X, live, q, l, sp2, h2):
        """Previous (speed, heading) of kept states; ties go to the first candidate."""
        m = self.m
        NH, c = m.NH, m.NH // 2
        speed = m.speed[live]
        sp = (X[q, l, :, h2] * speed[q, :, sp2]).argmax(axis=1)
        offs = np.arange(NH)
        hsrc = (h2[:, None] - offs[None, :] + c) % NH
        rows = m.head_rows[live]
        j = (Dv[q[:, None], l[:, None], sp[:, None], hsrc] * rows[q]).argmax(axis=1)
        return sp, hsrc[np.arange(len(j)), j]

    def advance(self, prev: _Slice, frame: Frame, terms: np.ndarray, mode: str) -> _Slice:
        m, beam = self.m, self.beam
        NV, NSP, NH = m.NV, m.NSP, m.NH
        live = np.flatnonzero(np.isfinite(terms))
        if live.size == 0:
            raise InferenceCollapse(frame.index, "evidence rules out every (state, env) pair")
        Pl = live.size
        g_lv, inv, p_prev, _, A, argA = self._pairs_stage(prev.keys, prev.w, mode, live)
        v, dest, wts, ok = m.stencil(g_lv)
        gi, j = np.nonzero(ok)
        if gi.size == 0:
            raise InferenceCollapse(frame.index, "every retained state moves out of the world")
        ukey = dest[gi, j] * NV + v[gi]
        uniq, uinv = np.unique(ukey, return_inverse=True)
        U = len(uniq)
        D4 = np.zeros((U, 4, Pl))
        D4[uinv, j] = A[gi] * wts[gi, j][:, None]
        if mode == "sum":
            B = D4.sum(axis=1)
        else:
            argJ = D4.argmax(axis=1)
            B = np.take_along_axis(D4, argJ[:, None, :], axis=1)[:, 0, :]
            srcg = np.full((U, 4), -1, dtype=np.int64)
            srcg[uinv, j] = gi
            gB = np.take_along_axis(srcg, argJ, axis=1)  # (U, Pl)
        locs, linv = _runs(uniq // NV)
        u_v = uniq % NV
        L = len(locs)
        Dv = np.zeros((Pl, L, NV))
        Dv[:, linv, u_v] = B.T
        Dv = Dv.reshape(Pl, L, NSP, NH)
        if mode == "sum":
            F = m.speedT[live][:, None] @ (Dv @ m.head[live][:, None])
        else:
            F, Xh = self._max_velocity(Dv, live)
        obs_log = m.obs_log(frame, locs, terms[live], live)  # (L, Pl)
        finite = np.isfinite(obs_log)
        if not finite.any():
            raise InferenceCollapse(frame.index, "observations rule out every candidate")
        shift = obs_log[finite].max()
        obs = np.exp(obs_log - shift)
        F = F.transpose(1, 2, 3, 0) * obs[:, None, None, :]  # (L, NSP, NH, Pl)
        vals = F.ravel()
        idx = _select(vals, beam)
        if idx.size == 0:
            raise InferenceCollapse(frame.index, "all candidates have zero probability")
        l_i, rem = np.divmod(idx, NV * Pl)
        v_i, q_i = np.divmod(rem, Pl)
        keys = (locs[l_i] * NV + v_i) * m.P + live[q_i]
        kept = vals[idx]
        obs_kept = obs[l_i, q_i]
        if mode == "sum":
            total = kept.sum()
            return _Slice(keys, kept / total, obs_kept, shift + math.log(total), total)
        # back-pointers for the kept states
        sp2, h2 = np.divmod(v_i, NH)
        sp, h = self._velocity_back(Dv, Xh, live, q_i, l_i, sp2, h2)
        uidx = np.full((L, NV), -1, dtype=np.int64)
        uidx[linv, u_v] = np.arange(U)
        u = uidx[l_i, sp * NH + h]
        g = gB[u, q_i]
        pp = argA[g, q_i]
        idx_of = np.full((len(g_lv), m.P), -1, dtype=np.int64)
        idx_of[inv, p_prev] = np.arange(len(prev.keys))
        back = idx_of[g, pp]
        top = kept.max()
        return _Slice(keys, kept / top, obs_kept, shift + math.log(top), top, back)

    # -- backward ------------------------------------------------------------
    def backward_step(self, cur: _Slice, nxt: _Slice, beta_next: np.ndarray):
        """Scaled backward message on ``cur`` plus this step's expected counts.

        Work is restricted to the pairs that occur in ``nxt``; every other
        successor pair has zero backward weight.
        """
        m = self.m
        P, NV, NSP, NH = m.P, m.NV, m.NSP, m.NH
        wn = nxt.obs * beta_next / nxt.total
        ln, vn, pn = m.codec.split(nxt.keys)
        live, qn = np.unique(pn, return_inverse=True)
        Pl = live.size
        locs_n, linv_n = _runs(ln)
        Ln = len(locs_n)
        Dw = np.zeros((Pl, Ln, NV))
        Dw[qn, linv_n, vn] = wn
        Dw = Dw.reshape(Pl, Ln, NSP, NH)
        speed, head, headT = m.speed[live], m.head[live], m.headT[live]
        Y = speed[:, None] @ Dw  # speed-reversed
        Z = Y @ headT[:, None]  # fully reversed, indexed by previous velocity
        X = Dw @ headT[:, None]  # heading-reversed only

        g_lv, inv, p_cur, Pm, A, _ = self._pairs_stage(cur.keys, cur.w, "sum", live)
        v, dest, wts, ok = m.stencil(g_lv)
        pos = np.clip(np.searchsorted(locs_n, np.maximum(dest, 0)), 0, Ln - 1)
        hit = ok & (locs_n[pos] == dest)
        wh = np.where(hit, wts, 0.0)
        sp_g, h_g = np.divmod(v, NH)
        Zg = Z[:, pos, sp_g[:, None], h_g[:, None]]  # (Pl, G, 4)
        Aw = np.einsum("pgj,gj->gp", Zg, wh)
        trans = m.trans[:, live]
        beta = (Aw @ trans.T)[inv, p_cur]

        xi = np.zeros((P, P))
        xi[:, live] = trans * (Pm.T @ Aw)
        Bd = np.zeros((Pl, Ln * NV))
        gi, j = np.nonzero(hit)
        contrib = (A[gi] * wts[gi, j][:, None]).T
        tgt = pos[gi, j] * NV + v[gi]
        for slot in range(4):
            sel = j == slot
            if sel.any():
                Bd[:, tgt[sel]] += contrib[:, sel]
        Bd = Bd.reshape(Pl, Ln, NSP, NH)
        speed_c = np.zeros((P, NSP, NSP))
        speed_c[live] = speed * (
            Bd.transpose(0, 2, 1, 3).reshape(Pl, NSP, Ln * NH) @ X.transpose(0, 1, 3, 2).reshape(Pl, Ln * NH, NSP)
        )
        head_c = np.zeros((P, NH, NH))
        head_c[live] = head * (
            Bd.transpose(0, 3, 1, 2).reshape(Pl, NH, Ln * NSP) @ Y.reshape(Pl, Ln * NSP, NH)
        )
        return beta, xi, speed_c, head_c


# ---------------------------------------------------------------------------
# Dense backend (single cell, single velocity)
# ---------------------------------------------------------------------------

class _Dense:
    """The same recursion on a P-vector; used when location and velocity are trivial."""

    def __init__(self, model: _Compiled, beam: BeamConfig):
        self.m = model
        self.beam = beam
        # stay-put location and the only velocity both have probability 1 when rows are valid
        self.T = model.trans * model.speed[:, 0, 0][None, :] * model.head[:, 0, 0][None, :]
        self.loc0 = np.zeros(1, dtype=np.int64)

    def obs_matrix(self, frames, terms) -> np.ndarray:
        m = self.m
        rows = [m.obs_log(f, self.loc0, terms[k])[0] for k, f in enumerate(frames)] if m.factors.gps else None
        if rows is not None:
            return np.array(rows)
        return terms + m.map_log[:, int(not m.inside[0])][None, :]

    def run(self, frames, terms, mode):
        m, beam = self.m, self.beam
        obs_log = self.obs_matrix(frames, terms)
        K, P = obs_log.shape
        shifts = np.array([row[np.isfinite(row)].max() if np.isfinite(row).any() else -np.inf for row in obs_log])
        obs = np.exp(obs_log - shifts[:, None])
        W = np.zeros((K, P))
        scale = np.zeros(K)
        totals = np.ones(K)
        back = np.zeros((K, P), dtype=np.int64) if mode == "max" else None
        prior = np.exp(m.init_pair + m.init_loc[0] + m.init_vel[0])
        for k in range(K):
            if not np.isfinite(shifts[k]):
                raise InferenceCollapse(frames[k].index, "observations rule out every state")
            if k == 0:
                vals = prior * obs[0]
            elif mode == "sum":
                vals = (W[k - 1] @ self.T) * obs[k]
            else:
                cand = W[k - 1][:, None] * self.T
                arg = cand.argmax(axis=0)
                back[k] = arg
                vals = cand[arg, np.arange(P)] * obs[k]
            idx = _select(vals, beam)
            if idx.size == 0:
                raise InferenceCollapse(frames[k].index, "all candidates have zero probability")
            kept = np.zeros(P)
            kept[idx] = vals[idx]
            norm = kept.sum() if mode == "sum" else kept.max()
            W[k] = kept / norm
            totals[k] = norm
            scale[k] = math.log(norm) + shifts[k]
        return W, obs, scale, totals, back


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def _compile(frames, params, bmap, factors):
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    return _Compiled(params, bmap, factors)


def _lattice_forward(lat: _Lattice, frames, terms, mode):
    slices = []
    for k, frame in enumerate(frames):
        if k == 0:
            sl = lat.initial(frame, terms[0], mode)
        else:
            sl = lat.advance(slices[-1], frame, terms[k], mode)
        slices.append(sl)
    return slices


def forward_filter(
    frames: Sequence[Frame],
    params: ModelParams,
    bmap: BuildingMap,
    beam: BeamConfig = BeamConfig(),
    ve=None,
    factors: Factors = ALL_FACTORS,
) -> FilterResult:
    """Filtered posteriors p(x_k | obs_0..k) on the pruned lattice.

    The returned log-likelihood sums the per-frame normalizers of the
    retained mass, so with pruning it is a lower bound on the exact value.
    """
    m = _compile(frames, params, bmap, factors)
    terms = m.frame_terms(frames, ve)
    if m.dense:
        W, _, scale, _, _ = _Dense(m, beam).run(frames, terms, "sum")
        posts = []
        for k in range(len(frames)):
            nz = np.flatnonzero(W[k] > 0)
            keys = nz.astype(np.int64)
            posts.append(FramePosterior(m.codec, keys, W[k][nz], float(scale[k])))
        return FilterResult(posts, float(scale.sum()))
    slices = _lattice_forward(_Lattice(m, beam), frames, terms, "sum")
    posts = [FramePosterior(m.codec, sl.keys, sl.w, sl.log_scale) for sl in slices]
    return FilterResult(posts, float(sum(sl.log_scale for sl in slices)))


def viterbi_decode(
    frames: Sequence[Frame],
    params: ModelParams,
    bmap: BuildingMap,
    beam: BeamConfig = BeamConfig(),
    ve=None,
    factors: Factors = ALL_FACTORS,
) -> ViterbiResult:
    """Most probable joint-state path through the pruned lattice."""
    m = _compile(frames, params, bmap, factors)
    terms = m.frame_terms(frames, ve)
    K = len(frames)
    if m.dense:
        W, _, scale, _, back = _Dense(m, beam).run(frames, terms, "max")
        path_idx = np.zeros(K, dtype=np.int64)
        path_idx[-1] = int(np.argmax(W[-1]))
        for k in range(K - 1, 0, -1):
            path_idx[k - 1] = back[k][path_idx[k]]
        keys = path_idx
        score = float(scale.sum() + math.log(W[-1][path_idx[-1]]))
    else:
        slices = _lattice_forward(_Lattice(m, beam), frames, terms, "max")
        i = int(np.argmax(slices[-1].w))
        keys = np.zeros(K, dtype=np.int64)
        for k in range(K - 1, -1, -1):
            keys[k] = slices[k].keys[i]
            if k > 0:
                i = int(slices[k].back[i])
        score = float(sum(sl.log_scale for sl in slices) + math.log(slices[-1].w.max()))
    return ViterbiResult([m.codec.decode(int(key)) for key in keys], score, keys)


def forward_backward(
    frames: Sequence[Frame],
    params: ModelParams,
    bmap: BuildingMap,
    beam: BeamConfig = BeamConfig(),
    ve=None,
    factors: Factors = ALL_FACTORS,
    keep_posteriors: bool = True,
) -> SmoothResult:
    """Smoothed posteriors and expected counts over the forward-retained lattice."""
    m = _compile(frames, params, bmap, factors)
    terms = m.frame_terms(frames, ve)
    K = len(frames)
    counts = ExpectedCounts.zeros(m.NSP, m.NH)
    gamma_pairs = np.zeros((K, m.P))
    posts: list[FramePosterior] = []
    pair_steps: list[np.ndarray] = []

    if m.dense:
        dense = _Dense(m, beam)
        W, obs, scale, totals, _ = dense.run(frames, terms, "sum")
        beta = np.zeros((K, m.P))
        beta[-1] = 1.0
        xi_total = np.zeros((m.P, m.P))
        for k in range(K - 2, -1, -1):
            wn = np.where(W[k + 1] > 0, obs[k + 1] * beta[k + 1], 0.0) / totals[k + 1]
            beta[k] = dense.T @ wn
            xi = W[k][:, None] * dense.T * wn[None, :]
            xi /= xi.sum()
            xi_total += xi
            if keep_posteriors:
                pair_steps.append(xi)
        pair_steps.reverse()
        gamma_pairs = W * beta
        gamma_pairs /= gamma_pairs.sum(axis=1, keepdims=True)
        keys = np.arange(m.P, dtype=np.int64)
        if keep_posteriors:
            for k in range(K):
                nz = np.flatnonzero(W[k] > 0)
                posts.append(FramePosterior(m.codec, keys[nz], gamma_pairs[k][nz], float(scale[k])))
        arrivals = xi_total.sum(axis=0)
        m.accumulate_pairs(counts, xi_total)
        m.accumulate_velocity(counts, arrivals[:, None, None] * np.ones((1, 1, 1)), arrivals[:, None, None] * np.ones((1, 1, 1)))
        m.accumulate_init(counts, keys, gamma_pairs[0])
        m.accumulate_obs(counts, frames, gamma_pairs)
        ll = float(scale.sum())
        counts.log_likelihood = ll
        counts.n_frames = K
        return SmoothResult(posts, pair_steps, counts, ll, m.codec)
    lat = _Lattice(m, beam)
    slices = _lattice_forward(lat, frames, terms, "sum")
    beta = np.ones(len(slices[-1].keys))
    gammas: list[Optional[np.ndarray]] = [None] * K
    gammas[-1] = slices[-1].w * beta
    steps: list[Optional[np.ndarray]] = [None] * (K - 1)
    speed_total = np.zeros((m.P, m.NSP, m.NSP))
    head_total = np.zeros((m.P, m.NH, m.NH))
    xi_total = np.zeros((m.P, m.P))
    for k in range(K - 2, -1, -1):
        beta, xi, speed_c, head_c = lat.backward_step(slices[k], slices[k + 1], beta)
        z = xi.sum()
        xi, speed_c, head_c = xi / z, speed_c / z, head_c / z
        g = slices[k].w * beta
        gammas[k] = g / g.sum()
        xi_total += xi
        speed_total += speed_c
        head_total += head_c
        if keep_posteriors:
            steps[k] = xi
    for k in range(K):
        _, _, p = m.codec.split(slices[k].keys)
        gamma_pairs[k] = np.bincount(p, gammas[k], minlength=m.P)
        if keep_posteriors:
            posts.append(FramePosterior(m.codec, slices[k].keys, gammas[k], slices[k].log_scale))
    m.accumulate_pairs(counts, xi_total)
    m.accumulate_velocity(counts, speed_total, head_total)
    m.accumulate_init(counts, slices[0].keys, gammas[0])
    m.accumulate_obs(counts, frames, gamma_pairs)
    ll = float(sum(sl.log_scale for sl in slices))
    counts.log_likelihood = ll
    counts.n_frames = K
    return SmoothResult(posts, steps if keep_posteriors else [], counts, ll, m.codec)
