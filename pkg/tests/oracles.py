"""Brute-force reference implementations used only by the tests.

Everything here enumerates the full joint state space and builds explicit
matrices from the scalar log-factor functions, so it shares no code path
with the vectorized inference engine.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import logsumexp

from activitydbn.factors import ALL_FACTORS, initial_log, observation_log, transition_log
from activitydbn.learning import initialize_params
from activitydbn.model import (
    ADMISSIBLE,
    N_BINS,
    N_ENVS,
    N_SPEED_GROUPS,
    N_STATES,
    BuildingMap,
    Environment,
    Frame,
    GpsFix,
    GridLocation,
    JointState,
    ModelParams,
    MotionState,
    MsbObservation,
    PolarVelocity,
    default_map_cpt,
    serialize_params,
    structural_masks,
)


def all_states(params: ModelParams) -> list[JointState]:
    w, h = params.world_shape
    out = []
    for x, y, sp, hd in itertools.product(range(w), range(h), range(params.n_speeds), range(params.n_headings)):
        for s, e in zip(*np.nonzero(params.pairs)):
            out.append(JointState(GridLocation(x, y), PolarVelocity(sp, hd), MotionState(int(s)), Environment(int(e))))
    return sorted(out, key=JointState.sort_key)


_TRANSITION_CACHE: dict = {}


def _dense_transitions(params):
    key = serialize_params(params)
    if key not in _TRANSITION_CACHE:
        states = all_states(params)
        _TRANSITION_CACHE[key] = np.array([[transition_log(a, b, params) for b in states] for a in states])
    return _TRANSITION_CACHE[key]


class DenseModel:
    """Explicit log-domain matrices of one model on one frame sequence."""

    def __init__(self, frames, params, bmap, ve=None, factors=ALL_FACTORS):
        self.states = all_states(params)
        n = len(self.states)
        self.log_t = _dense_transitions(params)
        self.log_obs = np.array(
            [[observation_log(s, f, params, bmap, factors) for s in self.states] for f in frames]
        )
        self.log_init = np.array([initial_log(s, frames[0], params, bmap, factors) for s in self.states])
        self.log_init -= self.log_obs[0]
        if ve is not None:
            table = np.asarray(getattr(ve, "table", ve))
            with np.errstate(divide="ignore"):
                self.log_obs += np.log(np.array([[table[k, s.state, s.env] for s in self.states] for k in range(len(frames))]))
        self.n = n
        self.K = len(frames)

    def forward(self):
        alphas = [self.log_init + self.log_obs[0]]
        for k in range(1, self.K):
            alphas.append(logsumexp(alphas[-1][:, None] + self.log_t, axis=0) + self.log_obs[k])
        return alphas

    def log_likelihood(self) -> float:
        return float(logsumexp(self.forward()[-1]))

    def filtered(self):
        return [np.exp(a - logsumexp(a)) for a in self.forward()]

    def smoothed(self):
        alphas = self.forward()
        betas = [np.zeros(self.n)]
        for k in range(self.K - 1, 0, -1):
            betas.insert(0, logsumexp(self.log_t + (self.log_obs[k] + betas[0])[None, :], axis=1))
        ll = logsumexp(alphas[-1])
        gammas = [np.exp(a + b - ll) for a, b in zip(alphas, betas)]
        xis = []
        for k in range(self.K - 1):
            x = alphas[k][:, None] + self.log_t + (self.log_obs[k + 1] + betas[k + 1])[None, :] - ll
            xis.append(np.exp(x))
        return gammas, xis

    def viterbi(self):
        delta = self.log_init + self.log_obs[0]
        backs = []
        for k in range(1, self.K):
            cand = delta[:, None] + self.log_t
            backs.append(np.argmax(cand, axis=0))
            delta = cand.max(axis=0) + self.log_obs[k]
        best = int(np.argmax(delta))
        path = [best]
        for b in reversed(backs):
            path.insert(0, int(b[path[0]]))
        return [self.states[i] for i in path], float(delta.max())

    def exhaustive_viterbi(self):
        """Score every path explicitly (tiny models only)."""
        best, best_score = None, -np.inf
        for path in itertools.product(range(self.n), repeat=self.K):
            score = self.log_init[path[0]] + self.log_obs[0, path[0]]
            for k in range(1, self.K):
                score += self.log_t[path[k - 1], path[k]] + self.log_obs[k, path[k]]
            if score > best_score:
                best, best_score = path, score
        return [self.states[i] for i in best], float(best_score)


def random_params(rng, width, height, speed_bins=(0.0,), n_headings=1, pairs=ADMISSIBLE, sparsity=0.0, map_cpt=None):
    """Random valid parameters respecting structural zeros."""
    pairs = np.asarray(pairs, dtype=bool)
    masks = structural_masks(pairs)
    nsp = len(speed_bins)

    def draw(mask):
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), np.shape(mask))
        raw = rng.gamma(1.0, size=mask.shape) * mask
        if sparsity:
            raw *= rng.random(mask.shape) >= sparsity
            raw[raw.sum(axis=-1) == 0] = mask[raw.sum(axis=-1) == 0]
        return raw / raw.sum(axis=-1, keepdims=True)

    loc = rng.gamma(1.0, size=(width, height))
    return ModelParams(
        env_trans=draw(np.array(masks["env_trans"])),
        state_trans=draw(np.array(masks["state_trans"])),
        heading_trans=draw(np.ones((N_STATES, n_headings), bool)),
        speed_trans=draw(np.ones((N_SPEED_GROUPS, nsp, nsp), bool)),
        obs_state=draw(np.ones((N_STATES, N_STATES, N_BINS), bool)),
        obs_env=draw(np.ones((N_ENVS, N_ENVS, N_BINS), bool)),
        map_cpt=default_map_cpt() if map_cpt is None else map_cpt,
        init_env=draw(masks["env"]),
        init_state=draw(masks["init_state"]),
        init_speed=draw(np.ones(nsp, bool)),
        init_heading=draw(np.ones(n_headings, bool)),
        init_location=loc / loc.sum(),
        speed_bins=speed_bins,
        pairs=pairs,
    )


def random_frames(rng, n, width=1, height=1, gps_rate=0.0, hdop=(1.0, 3.0)):
    frames = []
    for k in range(n):
        msb = MsbObservation(tuple(rng.integers(1, 11, N_STATES)), tuple(rng.integers(1, 11, N_ENVS)))
        gps = None
        if rng.random() < gps_rate:
            gps = GpsFix(float(rng.uniform(0, width)), float(rng.uniform(0, height)), float(rng.uniform(*hdop)))
        frames.append(Frame(k, msb, gps))
    return frames


def dense_counts(dm: DenseModel, frames, params: ModelParams):
    """Expected sufficient statistics accumulated state-by-state from dense posteriors."""
    from activitydbn.factors import heading_offset_index
    from activitydbn.inference import ExpectedCounts
    from activitydbn.model import SPEED_GROUP

    c = ExpectedCounts.zeros(params.n_speeds, params.n_headings)
    gammas, xis = dm.smoothed()
    for i, s in enumerate(dm.states):
        g = gammas[0][i]
        c.init_env[s.env] += g
        c.init_state[s.env, s.state] += g
        c.init_speed[s.velocity.speed_bin] += g
        c.init_heading[s.velocity.heading_bin] += g
    for k, f in enumerate(frames):
        for i, s in enumerate(dm.states):
            for j, b in enumerate(f.msb.state_bins):
                c.obs_state[j, s.state, b - 1] += gammas[k][i]
            for j, b in enumerate(f.msb.env_bins):
                c.obs_env[j, s.env, b - 1] += gammas[k][i]
    nh = params.n_headings
    for xi in xis:
        for a, b in zip(*np.nonzero(xi)):
            p, q = dm.states[a], dm.states[b]
            v = xi[a, b]
            c.env_trans[p.env, q.env] += v
            c.state_trans[p.state, q.env, q.state] += v
            c.speed_trans[SPEED_GROUP[q.state], p.velocity.speed_bin, q.velocity.speed_bin] += v
            c.heading_trans[q.state, heading_offset_index(p.velocity.heading_bin, q.velocity.heading_bin, nh)] += v
    return c


# Two-state Baum-Welch toy: a 1-cell world whose only pairs are (A, Outdoors) and (B, Outdoors).

ONE_CELL = BuildingMap(1, 1)
OUT = Environment.OUTDOORS
A, B = MotionState.STATIONARY, MotionState.WALKING


def two_state_toy():
    pairs = np.zeros_like(ADMISSIBLE)
    pairs[A, OUT] = pairs[B, OUT] = True
    p = initialize_params(0, 1, 1, (0.0,), 1, pairs, jitter=0.0)
    st_ = np.array(p.state_trans)
    st_[A, OUT, [A, B]] = (0.7, 0.3)
    st_[B, OUT, [A, B]] = (0.4, 0.6)
    init_state = np.array(p.init_state)
    init_state[OUT, [A, B]] = (0.55, 0.45)
    rng = np.random.default_rng(5)
    obs = rng.random(p.obs_state.shape) + 0.05
    obs /= obs.sum(-1, keepdims=True)
    return p.replace(state_trans=st_, init_state=init_state, obs_state=obs)


def hand_baum_welch(p, frames):
    """Expected transition counts from explicit enumeration of the 2^K paths."""

    def emit(s, f):
        e = np.prod([p.obs_state[i, s, b - 1] for i, b in enumerate(f.msb.state_bins)])
        return e * np.prod([p.obs_env[j, OUT, b - 1] for j, b in enumerate(f.msb.env_bins)])

    xi = np.zeros((2, 2))
    z = 0.0
    labels = (A, B)
    for path in itertools.product(range(2), repeat=len(frames)):
        s = [labels[i] for i in path]
        w = p.init_env[OUT] * p.init_state[OUT, s[0]] * emit(s[0], frames[0])
        for k in range(1, len(frames)):
            w *= p.state_trans[s[k - 1], OUT, s[k]] * emit(s[k], frames[k])
        z += w
        for k in range(1, len(frames)):
            xi[path[k - 1], path[k]] += w
    return xi / z, z
