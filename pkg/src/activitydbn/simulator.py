"""Synthetic worlds, activity scripts, and sensor streams.

The agent moves on the same grid the model uses: each frame's cell is drawn
from the bilinear landing distribution of the previous cell and velocity,
so every simulated step has non-zero probability under the model.  Indoors
the agent stays at the cell it entered through.

Sensor-board output is simulated at the level of classifier probabilities:
each frame has a *perceived* class drawn from a confusion row (held for a
while with some persistence, so errors come in bursts), and every detector
emits a Beta-distributed probability centred high for the perceived class
and low otherwise, which is then quantized.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .factors import displacement_stencil
from .features import quantize_array
from .model import (
    ADMISSIBLE,
    FRAME_DT,
    N_ENVS,
    N_HEADINGS,
    N_STATES,
    SPEED_BINS,
    Building,
    BuildingMap,
    Environment,
    Frame,
    GpsFix,
    GridLocation,
    JointState,
    LabelSpan,
    MotionState,
    MsbObservation,
    ParseError,
    PolarVelocity,
    spans_from_labels,
)


class PlacementError(RuntimeError):
    """Buildings could not be placed within the retry budget."""


class ScriptError(ValueError):
    """An activity script breaks the (state, environment) rules."""


def _default_state_confusion() -> tuple:
    # Off-diagonal mass goes to the classes a body-worn board plausibly mixes up.
    c = np.array(
        [
            # stat  walk  run   drive stairs
            [0.80, 0.05, 0.00, 0.15, 0.00],  # stationary
            [0.05, 0.80, 0.05, 0.00, 0.10],  # walking
            [0.00, 0.15, 0.80, 0.00, 0.05],  # running
            [0.15, 0.05, 0.00, 0.80, 0.00],  # driving
            [0.00, 0.15, 0.05, 0.00, 0.80],  # stairs
        ]
    )
    return tuple(map(tuple, c))


def _default_env_confusion() -> tuple:
    c = np.array(
        [
            [0.80, 0.15, 0.05],  # indoors
            [0.15, 0.80, 0.05],  # outdoors
            [0.05, 0.15, 0.80],  # vehicle
        ]
    )
    return tuple(map(tuple, c))


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    width: int = 120
    height: int = 120
    n_buildings: int = 4
    building_size: tuple[int, int] = (10, 20)
    drive_margin: int = 10
    corridor_m: int = 8
    placement_retries: int = 2000
    gps_every: int = 4
    hdop_range: tuple[float, float] = (1.0, 2.0)
    gps_noise_scale: float = 1.0
    outlier_rate_near: float = 0.15
    outlier_near_m: float = 10.0
    outlier_rate_base: float = 0.01
    outlier_offset_m: tuple[float, float] = (20.0, 50.0)
    indoor_dropout: float = 1.0
    indoor_leak_rate: float = 0.0
    indoor_leak_m: tuple[float, float] = (0.5, 2.5)
    state_confusion: tuple = field(default_factory=_default_state_confusion)
    env_confusion: tuple = field(default_factory=_default_env_confusion)
    concentration: float = 12.0
    target_high: float = 0.75
    target_low: float = 0.2
    confusion_persistence: float = 0.8  # per-frame chance the classifier keeps its previous perceived class
    segment_s: tuple[float, float] = (30.0, 120.0)
    speed_bins: tuple[float, ...] = SPEED_BINS
    n_headings: int = N_HEADINGS

    def __post_init__(self):
        for name in ("outlier_rate_near", "outlier_rate_base", "indoor_dropout", "indoor_leak_rate", "confusion_persistence", "target_high", "target_low"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name, n in (("state_confusion", N_STATES), ("env_confusion", N_ENVS)):
            c = np.asarray(getattr(self, name), dtype=float)
            if c.shape != (n, n) or (c < 0).any() or np.abs(c.sum(axis=1) - 1).max() > 1e-9:
                raise ValueError(f"{name} must be a {n}x{n} row-stochastic matrix")
            object.__setattr__(self, name, tuple(map(tuple, c.tolist())))
        if self.width < 1 or self.height < 1:
            raise ValueError("world must have at least one cell")
        if self.gps_every < 1:
            raise ValueError("gps_every must be >= 1")
        if self.concentration <= 0:
            raise ValueError("concentration must be positive")
        lo, hi = self.hdop_range
        if not 0 < lo <= hi:
            raise ValueError("hdop_range must satisfy 0 < low <= high")
        lo, hi = self.indoor_leak_m
        if not 0 <= lo <= hi:
            raise ValueError("indoor_leak_m must satisfy 0 <= low <= high")
        for name in ("building_size", "hdop_range", "outlier_offset_m", "indoor_leak_m", "segment_s", "speed_bins"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def replace(self, **changes) -> "SimConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return SimConfig(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown simulator settings: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------

def generate_world(config: SimConfig, rng: Optional[np.random.Generator] = None) -> BuildingMap:
    """Non-overlapping integer boxes kept clear of the perimeter driving band."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    lo_size, hi_size = config.building_size
    m, gap = config.drive_margin, config.corridor_m
    boxes: list[tuple[int, int, int, int]] = []
    tries = 0
    while len(boxes) < config.n_buildings:
        tries += 1
        if tries > config.placement_retries:
            raise PlacementError(f"placed only {len(boxes)} of {config.n_buildings} buildings")
        w, h = (int(v) for v in rng.integers(lo_size, hi_size + 1, 2))
        if config.width - 2 * m - w < 0 or config.height - 2 * m - h < 0:
            continue
        x0 = int(rng.integers(m, config.width - m - w + 1))
        y0 = int(rng.integers(m, config.height - m - h + 1))
        cand = (x0, y0, x0 + w, y0 + h)
        if all(_separated(cand, b, gap) for b in boxes):
            boxes.append(cand)
    return BuildingMap(config.width, config.height, tuple(Building(*map(float, b)) for b in boxes))


def _separated(a, b, gap) -> bool:
    return a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """One scripted activity block.

    ``speed`` is in m/s and snapped to the nearest speed bin (default: a
    typical speed for the state).  ``heading`` is a sector index; ``None``
    keeps the current heading.  Indoor segments never move.
    """

    state: MotionState
    env: Environment
    duration_s: float
    speed: Optional[float] = None
    heading: Optional[int] = None


TYPICAL_SPEED = {
    MotionState.STATIONARY: 0.0,
    MotionState.WALKING: 1.5,
    MotionState.RUNNING: 4.0,
    MotionState.DRIVING_VEHICLE: 7.0,
    MotionState.UP_DOWN_STAIRS: 0.5,
}


def validate_script(script: Sequence[Segment]) -> None:
    prev_env = None
    for i, seg in enumerate(script):
        s, e = MotionState(seg.state), Environment(seg.env)
        if not ADMISSIBLE[s, e]:
            raise ScriptError(f"segment {i}: {s.name} is impossible in {e.name}")
        if seg.duration_s <= 0:
            raise ScriptError(f"segment {i}: duration must be positive")
        if prev_env is not None and {prev_env, e} == {Environment.INDOORS, Environment.VEHICLE}:
            raise ScriptError(f"segment {i}: cannot go between {prev_env.name} and {e.name} without going outdoors")
        prev_env = e


@dataclass
class Trace:
    truth: list[JointState]
    frames: list[Frame]
    outliers: np.ndarray  # True where the GPS fix at that frame is an injected outlier

    @property
    def states(self) -> np.ndarray:
        return np.array([int(j.state) for j in self.truth])

    @property
    def envs(self) -> np.ndarray:
        return np.array([int(j.env) for j in self.truth])

    @property
    def spans(self) -> list[LabelSpan]:
        return spans_from_labels(self.states, self.envs)

    def __len__(self) -> int:
        return len(self.frames)

    def truth_to_dict(self) -> dict:
        return {
            "frames": [
                {
                    "x": j.location.x_cell,
                    "y": j.location.y_cell,
                    "speed_bin": j.velocity.speed_bin,
                    "heading_bin": j.velocity.heading_bin,
                    "state": j.state.name,
                    "env": j.env.name,
                    "outlier": bool(o),
                }
                for j, o in zip(self.truth, self.outliers)
            ]
        }


def truth_from_dict(data: dict) -> tuple[list[JointState], np.ndarray]:
    try:
        truth = [
            JointState(
                GridLocation(int(r["x"]), int(r["y"])),
                PolarVelocity(int(r["speed_bin"]), int(r["heading_bin"])),
                MotionState[r["state"]],
                Environment[r["env"]],
            )
            for r in data["frames"]
        ]
        outliers = np.array([bool(r.get("outlier", False)) for r in data["frames"]], dtype=bool)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed ground truth: {exc!r}") from exc
    return truth, outliers


class _Walker:
    """Moves an agent on the grid and records the ground-truth path."""

    def __init__(self, world: BuildingMap, config: SimConfig, rng: np.random.Generator, start: GridLocation):
        self.world, self.config, self.rng = world, config, rng
        self.nh = config.n_headings
        self.speeds = np.asarray(config.speed_bins)
        self.offsets, self.weights = displacement_stencil(config.speed_bins, self.nh)
        self.inside = world.inside_mask
        self.free = self._free_cells()
        self.loc = (start.x_cell, start.y_cell)
        self.vel = (0, 0)
        self.path: list[JointState] = []
        self._fields: dict = {}

    def _free_cells(self) -> np.ndarray:
        """Cells at least one cell away (8-neighbourhood) from every building cell."""
        blocked = np.pad(self.inside, 1)
        grown = np.zeros_like(self.inside)
        W, H = self.inside.shape
        for dx in (0, 1, 2):
            for dy in (0, 1, 2):
                grown |= blocked[dx : dx + W, dy : dy + H]
        return ~grown

    def speed_bin(self, speed: float) -> int:
        return int(np.argmin(np.abs(self.speeds - speed)))

    def full(self, limit: int) -> bool:
        return len(self.path) >= limit

    # -- one frame ---------------------------------------------------------
    def move(self, avoid_buildings: bool) -> None:
        """Advance the cell by the current velocity (no-op before the first frame)."""
        if self.path:
            self.loc = self._land(avoid_buildings)

    def record(self, state: MotionState, env: Environment, speed_bin: int, heading: int) -> None:
        self.vel = (speed_bin, heading % self.nh)
        self.path.append(
            JointState(GridLocation(*self.loc), PolarVelocity(*self.vel), MotionState(state), Environment(env))
        )

    def step(self, state: MotionState, env: Environment, speed_bin: int, heading: int) -> None:
        self.move(env is not Environment.INDOORS)
        self.record(state, env, 0 if env is Environment.INDOORS else speed_bin, heading)

    def _land(self, avoid_buildings: bool) -> tuple[int, int]:
        v = self.vel[0] * self.nh + self.vel[1]
        x, y = self.loc
        cells, probs = [], []
        for (ox, oy), w in zip(self.offsets[v], self.weights[v]):
            cx, cy = x + int(ox), y + int(oy)
            if w > 0 and 0 <= cx < self.world.width and 0 <= cy < self.world.height:
                cells.append((cx, cy))
                probs.append(w)
        if not cells:
            raise ScriptError(f"agent at {self.loc} would leave the world")
        if avoid_buildings:
            keep = [i for i, c in enumerate(cells) if not self.inside[c]]
            if keep and len(keep) < len(cells):
                cells = [cells[i] for i in keep]
                probs = [probs[i] for i in keep]
        probs = np.asarray(probs) / np.sum(probs)
        return cells[int(self.rng.choice(len(cells), p=probs))]

    # -- headings ----------------------------------------------------------
    def heading_to(self, target: tuple[float, float]) -> int:
        dx = target[0] - self.loc[0]
        dy = target[1] - self.loc[1]
        if dx == 0 and dy == 0:
            return self.vel[1]
        return int(round(math.atan2(dy, dx) / (2 * math.pi / self.nh))) % self.nh

    def distance_field(self, target: tuple[int, int]) -> np.ndarray:
        if target in self._fields:
            return self._fields[target]
        W, H = self.world.width, self.world.height
        dist = np.full((W, H), np.inf)
        dist[target] = 0
        q = deque([target])
        while q:
            x, y = q.popleft()
            d = dist[x, y] + 1
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    nx, ny = x + dx, y + dy
                    if 0 <= nx < W and 0 <= ny < H and self.free[nx, ny] and dist[nx, ny] > d:
                        dist[nx, ny] = d
                        q.append((nx, ny))
        self._fields[target] = dist
        return dist

    def downhill(self, dist: np.ndarray) -> int:
        """Heading sector whose neighbouring cell is closest to the target."""
        best, best_h = np.inf, self.vel[1]
        x, y = self.loc
        for k in range(self.nh):
            h = (self.vel[1] + (k + 1) // 2 * (1 if k % 2 else -1)) % self.nh
            th = 2 * math.pi * h / self.nh
            nx, ny = x + int(round(math.cos(th))), y + int(round(math.sin(th)))
            if 0 <= nx < self.world.width and 0 <= ny < self.world.height and dist[nx, ny] < best:
                best, best_h = dist[nx, ny], h
        return best_h

    # -- compound moves ----------------------------------------------------
    def go_to(self, target, state, env, speed_bin, limit, max_frames=None) -> bool:
        """Follow the free-space distance field; True once the target is reached."""
        dist = self.distance_field(target)
        n = 0
        while not self.full(limit) and (max_frames is None or n < max_frames):
            if max(abs(self.loc[0] - target[0]), abs(self.loc[1] - target[1])) <= 1:
                return True
            h = self.downhill(dist) if np.isfinite(dist[self.loc]) else self.heading_to(target)
            self.step(state, env, speed_bin, h)
            n += 1
        return False

    def hold(self, state, env, frames, limit) -> None:
        for _ in range(frames):
            if self.full(limit):
                return
            self.step(state, env, 0, self.vel[1])


def _frames(seconds: float) -> int:
    return max(1, int(round(seconds / FRAME_DT)))


class _Planner:
    """Default activity mix: outdoor walks and runs, pauses, building visits, one drive."""

    def __init__(self, walker: _Walker, config: SimConfig, rng: np.random.Generator, limit: int):
        self.w, self.c, self.rng, self.limit = walker, config, rng, limit
        self.doors = [self._door(b) for b in walker.world.buildings]
        free = np.argwhere(walker.free)
        m = config.drive_margin
        inner = free[
            (free[:, 0] >= m) & (free[:, 0] < config.width - m) & (free[:, 1] >= m) & (free[:, 1] < config.height - m)
        ]
        self.waypoints = inner if len(inner) else free

    def seg_frames(self) -> int:
        return _frames(self.rng.uniform(*self.c.segment_s))

    def _door(self, b: Building):
        """(approach cell outside, door cell inside, heading in) on a random face."""
        side = int(self.rng.integers(4))
        x0, y0, x1, y1 = int(b.min_x), int(b.min_y), int(b.max_x) - 1, int(b.max_y) - 1
        mx = int(self.rng.integers(x0 + 1, max(x0 + 2, x1)))
        my = int(self.rng.integers(y0 + 1, max(y0 + 2, y1)))
        if side == 0:
            return (x1 + 3, my), (x1, my), 4
        if side == 1:
            return (mx, y1 + 3), (mx, y1), 6
        if side == 2:
            return (x0 - 3, my), (x0, my), 0
        return (mx, y0 - 3), (mx, y0), 2

    def random_waypoint(self) -> tuple[int, int]:
        return tuple(int(v) for v in self.waypoints[int(self.rng.integers(len(self.waypoints)))])

    def outdoor_move(self, state: MotionState, speed_choices) -> None:
        frames = self.seg_frames()
        sp = self.w.speed_bin(float(self.rng.choice(speed_choices)))
        done = 0
        while done < frames and not self.w.full(self.limit):
            before = len(self.w.path)
            self.w.go_to(self.random_waypoint(), state, Environment.OUTDOORS, sp, self.limit, frames - done)
            done += len(self.w.path) - before
            if len(self.w.path) == before:
                break

    def visit(self) -> None:
        if not self.doors:
            return self.outdoor_move(MotionState.WALKING, [1.5])
        approach, door, heading_in = self.doors[int(self.rng.integers(len(self.doors)))]
        walk = self.w.speed_bin(1.5)
        if not self.w.go_to(approach, MotionState.WALKING, Environment.OUTDOORS, walk, self.limit):
            return
        # straight in through the door; the first frame on a building cell is indoors
        w = self.w
        while not w.full(self.limit):
            w.move(avoid_buildings=False)
            if w.inside[w.loc]:
                w.record(MotionState.WALKING, Environment.INDOORS, 0, heading_in)
                break
            w.record(MotionState.WALKING, Environment.OUTDOORS, walk, heading_in)
        for _ in range(int(self.rng.integers(2, 4))):
            state = MotionState(int(self.rng.choice([0, 1, 4], p=[0.4, 0.3, 0.3])))
            w.hold(state, Environment.INDOORS, self.seg_frames(), self.limit)
        # out again, then clear the building by a couple of cells
        heading_out = (heading_in + w.nh // 2) % w.nh
        if not w.full(self.limit):
            w.move(avoid_buildings=False)
            w.record(MotionState.WALKING, Environment.INDOORS, walk, heading_out)
        while not w.full(self.limit):
            w.move(avoid_buildings=False)
            env = Environment.INDOORS if w.inside[w.loc] else Environment.OUTDOORS
            w.record(MotionState.WALKING, env, walk, heading_out)
            if env is Environment.OUTDOORS and w.free[w.loc]:
                break

    def drive(self) -> None:
        W, H, m = self.c.width, self.c.height, self.c.drive_margin
        c = max(1, m // 2)
        corners = [(c, c), (W - 1 - c, c), (W - 1 - c, H - 1 - c), (c, H - 1 - c)]
        start = int(self.rng.integers(4))
        car = corners[start]
        walk = self.w.speed_bin(1.5)
        if not self.w.go_to(car, MotionState.WALKING, Environment.OUTDOORS, walk, self.limit):
            return
        self.w.hold(MotionState.STATIONARY, Environment.VEHICLE, _frames(self.rng.uniform(5, 15)), self.limit)
        sp = self.w.speed_bin(TYPICAL_SPEED[MotionState.DRIVING_VEHICLE])
        frames = self.seg_frames()
        nxt = (start + 1) % 4
        for _ in range(frames):
            if self.w.full(self.limit):
                return
            tx, ty = corners[nxt]
            if abs(self.w.loc[0] - tx) + abs(self.w.loc[1] - ty) <= 2:
                nxt = (nxt + 1) % 4
                tx, ty = corners[nxt]
            self.w.step(MotionState.DRIVING_VEHICLE, Environment.VEHICLE, sp, self.w.heading_to((tx, ty)))
        self.w.hold(MotionState.STATIONARY, Environment.VEHICLE, _frames(self.rng.uniform(5, 15)), self.limit)

    def run(self) -> None:
        drive_at = int(self.limit * self.rng.uniform(0.2, 0.6))
        driven = False
        while not self.w.full(self.limit):
            if not driven and len(self.w.path) >= drive_at:
                self.drive()
                driven = True
                continue
            kind = int(self.rng.choice(4, p=[0.3, 0.2, 0.15, 0.35]))
            if kind == 0:
                self.outdoor_move(MotionState.WALKING, [1.0, 1.5])
            elif kind == 1:
                self.outdoor_move(MotionState.RUNNING, [2.5, 4.0])
            elif kind == 2:
                self.w.hold(MotionState.STATIONARY, Environment.OUTDOORS, self.seg_frames(), self.limit)
            else:
                self.visit()


def _run_script(walker: _Walker, script: Sequence[Segment], limit: int) -> None:
    validate_script(script)
    for seg in script:
        s, e = MotionState(seg.state), Environment(seg.env)
        speed = TYPICAL_SPEED[s] if seg.speed is None else seg.speed
        sp = 0 if e is Environment.INDOORS else walker.speed_bin(speed)
        heading = walker.vel[1] if seg.heading is None else seg.heading
        for _ in range(_frames(seg.duration_s)):
            if walker.full(limit):
                return
            walker.step(s, e, sp, heading)


class _Sensors:
    """Perceived-class chains and per-detector probability draws."""

    def __init__(self, config: SimConfig, rng: np.random.Generator):
        self.c, self.rng = config, rng
        self.conf = {
            "state": np.asarray(config.state_confusion),
            "env": np.asarray(config.env_confusion),
        }

    def perceived(self, truth: np.ndarray, which: str) -> np.ndarray:
        conf = self.conf[which]
        rho = self.c.confusion_persistence
        out = np.empty(len(truth), dtype=int)
        cur = -1
        for k, t in enumerate(truth):
            if cur < 0 or (k > 0 and truth[k - 1] != t) or self.rng.random() >= rho:
                cur = int(self.rng.choice(len(conf), p=conf[t]))
            out[k] = cur
        return out

    def bins(self, perceived: np.ndarray, n: int) -> np.ndarray:
        mu = np.where(np.arange(n)[None, :] == perceived[:, None], self.c.target_high, self.c.target_low)
        k = self.c.concentration
        p = self.rng.beta(np.maximum(k * mu, 1e-3), np.maximum(k * (1 - mu), 1e-3))
        return quantize_array(p)


def _leak_outside(world: BuildingMap, x: float, y: float, gap: float) -> tuple[float, float]:
    b = next((b for b in world.buildings if b.contains(x, y)), None)
    if b is None:
        return x, y
    exits = [
        (x - b.min_x, (b.min_x - gap, y)),
        (b.max_x - x, (b.max_x + gap, y)),
        (y - b.min_y, (x, b.min_y - gap)),
        (b.max_y - y, (x, b.max_y + gap)),
    ]
    return min(exits, key=lambda e: e[0])[1]


def _emit_gps(world: BuildingMap, config: SimConfig, rng: np.random.Generator, truth: list[JointState]):
    fixes: list[Optional[GpsFix]] = [None] * len(truth)
    outliers = np.zeros(len(truth), dtype=bool)
    for k in range(0, len(truth), config.gps_every):
        j = truth[k]
        if j.env is Environment.INDOORS and rng.random() < config.indoor_dropout:
            continue
        cx, cy = j.location.center()
        hdop = float(rng.uniform(*config.hdop_range))
        if j.env is Environment.INDOORS and rng.random() < config.indoor_leak_rate:
            # confident fix that lands just outside the nearest wall
            x, y = _leak_outside(world, cx, cy, float(rng.uniform(*config.indoor_leak_m)))
            outliers[k] = True
            if 0 <= x < world.width and 0 <= y < world.height:
                fixes[k] = GpsFix(x, y, hdop)
            continue
        sd = math.sqrt(2.0 * hdop) * config.gps_noise_scale
        x, y = cx + sd * rng.standard_normal(), cy + sd * rng.standard_normal()
        near = any(b.distance(cx, cy) <= config.outlier_near_m for b in world.buildings)
        rate = config.outlier_rate_near if near else config.outlier_rate_base
        if rng.random() < rate:
            r = rng.uniform(*config.outlier_offset_m)
            a = rng.uniform(0, 2 * math.pi)
            x, y = x + r * math.cos(a), y + r * math.sin(a)
            outliers[k] = True
        if 0 <= x < world.width and 0 <= y < world.height:
            fixes[k] = GpsFix(x, y, hdop)
    return fixes, outliers


def generate_trace(
    world: BuildingMap,
    config: SimConfig,
    length_frames: int,
    rng: Optional[np.random.Generator] = None,
    script: Optional[Sequence[Segment]] = None,
    start: Optional[GridLocation] = None,
) -> Trace:
    """Ground-truth path plus the frames a wearer's sensors would have produced."""
    if length_frames < 1:
        raise ValueError("length_frames must be >= 1")
    if (world.width, world.height) != (config.width, config.height):
        raise ValueError("world size differs from the simulator config")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if script is not None:
        validate_script(script)
    if start is None:
        free = np.argwhere(~world.inside_mask)
        x, y = free[int(rng.integers(len(free)))]
        start = GridLocation(int(x), int(y))
    walker = _Walker(world, config, rng, start)
    if script is None:
        _Planner(walker, config, rng, length_frames).run()
    else:
        _run_script(walker, script, length_frames)
        while not walker.full(length_frames):
            last = walker.path[-1]
            walker.step(last.state, last.env, last.velocity.speed_bin, last.velocity.heading_bin)
    truth = walker.path[:length_frames]
    sensors = _Sensors(config, rng)
    states = np.array([int(j.state) for j in truth])
    envs = np.array([int(j.env) for j in truth])
    sbins = sensors.bins(sensors.perceived(states, "state"), N_STATES)
    ebins = sensors.bins(sensors.perceived(envs, "env"), N_ENVS)
    fixes, outliers = _emit_gps(world, config, rng, truth)
    frames = [Frame(k, MsbObservation(tuple(sbins[k]), tuple(ebins[k])), fixes[k]) for k in range(len(truth))]
    return Trace(truth, frames, outliers)


def generate_dataset(config: SimConfig, n_traces: int, length_frames: int) -> tuple[BuildingMap, list[Trace]]:
    """One world and ``n_traces`` independent traces, all determined by the seed."""
    seq = np.random.SeedSequence(config.seed)
    world_seed, *trace_seeds = seq.spawn(n_traces + 1)
    world = generate_world(config, np.random.default_rng(world_seed))
    traces = [generate_trace(world, config, length_frames, np.random.default_rng(s)) for s in trace_seeds]
    return world, traces
