"""Log-domain conditional distributions of the DBN.

Scalar functions take domain objects and are what the tests reason about;
the ``*_table`` helpers build the vectorized forms the inference engine
uses.  Both are derived from the same parameter tables.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .model import (
    ADMISSIBLE,
    FRAME_DT,
    HDOP_GATE,
    SPEED_GROUP,
    BuildingMap,
    Environment,
    Frame,
    GridLocation,
    JointState,
    MotionState,
    ModelParams,
    MsbObservation,
    PolarVelocity,
    env_class,
    map_class,
)

NEG_INF = float("-inf")
_SNAP = 1e-9


@dataclass(frozen=True)
class Factors:
    """Which observation factors take part in scoring.

    Dropping factors is how the ablation rows degrade the full model.
    """

    state_obs: bool = True
    env_obs: bool = True
    gps: bool = True
    map: bool = True

    def count(self) -> int:
        return sum((self.state_obs, self.env_obs, self.gps, self.map))

    def issubset(self, other: "Factors") -> bool:
        mine = (self.state_obs, self.env_obs, self.gps, self.map)
        theirs = (other.state_obs, other.env_obs, other.gps, other.map)
        return all(t or not m for m, t in zip(mine, theirs))


ALL_FACTORS = Factors()
MSB_ONLY = Factors(gps=False, map=False)


def _log(p: float) -> float:
    return math.log(p) if p > 0 else NEG_INF


# ---------------------------------------------------------------------------
# GPS
# ---------------------------------------------------------------------------

def gps_log_likelihood(frame: Frame, location: GridLocation, params: ModelParams, hdop_gate: float = HDOP_GATE) -> float:
    gps = frame.gps
    if gps is None or gps.hdop > hdop_gate:
        return 0.0
    width, height = params.world_shape
    if not (0 <= location.x_cell < width and 0 <= location.y_cell < height):
        raise ValueError(f"{location} is outside the world")
    cx, cy = location.center()
    var = 2.0 * gps.hdop
    d2 = (gps.x_m - cx) ** 2 + (gps.y_m - cy) ** 2
    return params.gps_exponent * (-math.log(2.0 * math.pi * var) - d2 / (2.0 * var))


def gps_log_cells(frame: Frame, locs: np.ndarray, height: int, exponent: float, hdop_gate: float = HDOP_GATE) -> np.ndarray:
    """GPS log-score for flat cell indices ``x * height + y``."""
    gps = frame.gps
    if gps is None or gps.hdop > hdop_gate:
        return np.zeros(len(locs))
    cx = locs // height + 0.5
    cy = locs % height + 0.5
    var = 2.0 * gps.hdop
    d2 = (gps.x_m - cx) ** 2 + (gps.y_m - cy) ** 2
    return exponent * (-math.log(2.0 * math.pi * var) - d2 / (2.0 * var))


# ---------------------------------------------------------------------------
# Sensor board
# ---------------------------------------------------------------------------

def msb_log_likelihood(obs: MsbObservation, s: MotionState, e: Environment, params: ModelParams, factors: Factors = ALL_FACTORS) -> float:
    total = 0.0
    if factors.state_obs:
        for i, b in enumerate(obs.state_bins):
            total += _log(params.obs_state[i, s, b - 1])
    if factors.env_obs:
        for i, b in enumerate(obs.env_bins):
            total += _log(params.obs_env[i, e, b - 1])
    return total


def msb_log_table(state_bins: np.ndarray, env_bins: np.ndarray, params: ModelParams, factors: Factors = ALL_FACTORS) -> np.ndarray:
    """Vectorized sensor-board log-likelihood, shape (frames, |S|, |E|)."""
    state_bins = np.asarray(state_bins, dtype=int).reshape(-1, params.obs_state.shape[0])
    env_bins = np.asarray(env_bins, dtype=int).reshape(-1, params.obs_env.shape[0])
    K = state_bins.shape[0]
    out = np.zeros((K, params.obs_state.shape[1], params.obs_env.shape[1]))
    with np.errstate(divide="ignore"):
        if factors.state_obs:
            log_s = np.log(params.obs_state)  # (i, s, bin)
            for i in range(log_s.shape[0]):
                out += log_s[i][:, state_bins[:, i] - 1].T[:, :, None]
        if factors.env_obs:
            log_e = np.log(params.obs_env)
            for i in range(log_e.shape[0]):
                out += log_e[i][:, env_bins[:, i] - 1].T[:, None, :]
    return out


# ---------------------------------------------------------------------------
# Map constraint
# ---------------------------------------------------------------------------

def map_constraint_log(e: Environment, location: GridLocation, bmap: BuildingMap, params: ModelParams) -> float:
    return _log(params.map_cpt[env_class(Environment(e)), map_class(location, bmap)])


# ---------------------------------------------------------------------------
# Motion
# ---------------------------------------------------------------------------

def heading_angle(heading_bin: int, n_headings: int) -> float:
    return 2.0 * math.pi * heading_bin / n_headings


def displacement_stencil(speed_bins, n_headings: int, dt: float = FRAME_DT):
    """Bilinear landing cells for every velocity, independent of the start cell.

    Returns ``offsets`` of shape (V, 4, 2) and ``weights`` of shape (V, 4)
    with ``V = len(speed_bins) * n_headings`` in (speed, heading) order.
    Unused slots carry weight 0.  The arrays are shared and read-only.
    """
    return _stencil(tuple(float(v) for v in speed_bins), int(n_headings), float(dt))


@functools.lru_cache(maxsize=32)
def _stencil(speed_bins: tuple, n_headings: int, dt: float):
    nv = len(speed_bins) * n_headings
    offsets = np.zeros((nv, 4, 2), dtype=np.int64)
    weights = np.zeros((nv, 4))
    for sp, speed in enumerate(speed_bins):
        for h in range(n_headings):
            theta = heading_angle(h, n_headings)
            dx = _snap(speed * dt * math.cos(theta))
            dy = _snap(speed * dt * math.sin(theta))
            ix, iy = math.floor(dx), math.floor(dy)
            fx, fy = dx - ix, dy - iy
            v = sp * n_headings + h
            slots = (
                (ix, iy, (1 - fx) * (1 - fy)),
                (ix + 1, iy, fx * (1 - fy)),
                (ix, iy + 1, (1 - fx) * fy),
                (ix + 1, iy + 1, fx * fy),
            )
            for j, (ox, oy, wgt) in enumerate(slots):
                offsets[v, j] = (ox, oy)
                weights[v, j] = wgt
    offsets.setflags(write=False)
    weights.setflags(write=False)
    return offsets, weights


def _snap(d: float) -> float:
    r = round(d)
    return float(r) if abs(d - r) < _SNAP else d


def location_transition_support(l: GridLocation, v: PolarVelocity, width: int, height: int, speed_bins, n_headings: int) -> list[tuple[GridLocation, float]]:
    """Distribution of the next cell: bilinear split of the continuous endpoint.

    Mass that would leave the world is dropped and the rest renormalized;
    an empty list means every landing cell is outside.
    """
    if not (0 <= l.x_cell < width and 0 <= l.y_cell < height):
        raise ValueError(f"{l} is outside the world")
    offsets, weights = displacement_stencil(speed_bins, n_headings)
    vi = v.speed_bin * n_headings + v.heading_bin
    cells = []
    for (ox, oy), wgt in zip(offsets[vi], weights[vi]):
        x, y = l.x_cell + int(ox), l.y_cell + int(oy)
        if wgt > 0 and 0 <= x < width and 0 <= y < height:
            cells.append((GridLocation(x, y), float(wgt)))
    total = sum(w for _, w in cells)
    return [(c, w / total) for c, w in cells]


def heading_offset_index(h_prev: int, h_next: int, n_headings: int) -> int:
    """Column of ``heading_trans`` for a sector change; offsets run -n/2 .. n/2-1."""
    return (h_next - h_prev + n_headings // 2) % n_headings


def heading_matrix(heading_row: np.ndarray) -> np.ndarray:
    """Circulant p(h' | h) built from an offset distribution."""
    n = len(heading_row)
    idx = (np.arange(n)[None, :] - np.arange(n)[:, None] + n // 2) % n
    return heading_row[idx]


def transition_log(prev: JointState, nxt: JointState, params: ModelParams) -> float:
    width, height = params.world_shape
    nh = params.n_headings
    s, e = prev.state, prev.env
    s2, e2 = nxt.state, nxt.env
    if not (ADMISSIBLE[s2, e2] and params.pairs[s2, e2]):
        return NEG_INF
    total = _log(params.env_trans[e, e2]) + _log(params.state_trans[s, e2, s2])
    total += _log(params.heading_trans[s2, heading_offset_index(prev.velocity.heading_bin, nxt.velocity.heading_bin, nh)])
    total += _log(params.speed_trans[SPEED_GROUP[s2], prev.velocity.speed_bin, nxt.velocity.speed_bin])
    support = location_transition_support(prev.location, prev.velocity, width, height, params.speed_bins, nh)
    p_loc = sum(w for c, w in support if c == nxt.location)
    return total + _log(p_loc)


def observation_log(state: JointState, frame: Frame, params: ModelParams, bmap: BuildingMap, factors: Factors = ALL_FACTORS) -> float:
    """All per-frame evidence for one joint state: sensor board, GPS, map."""
    total = msb_log_likelihood(frame.msb, state.state, state.env, params, factors)
    if factors.gps:
        total += gps_log_likelihood(frame, state.location, params)
    if factors.map:
        total += map_constraint_log(state.env, state.location, bmap, params)
    return total


def initial_log(state: JointState, first_frame: Frame, params: ModelParams, bmap: BuildingMap, factors: Factors = ALL_FACTORS) -> float:
    if not params.pairs[state.state, state.env]:
        return NEG_INF
    prior = (
        _log(params.init_env[state.env])
        + _log(params.init_state[state.env, state.state])
        + _log(params.init_speed[state.velocity.speed_bin])
        + _log(params.init_heading[state.velocity.heading_bin])
        + _log(params.init_location[state.location.x_cell, state.location.y_cell])
    )
    return prior + observation_log(state, first_frame, params, bmap, factors)
