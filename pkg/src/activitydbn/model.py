"""Domain types for the activity / spatial-context DBN.

Everything here is immutable once built.  Probability tables are stored as
numpy arrays with the child variable on the last axis; ``ModelParams``
documents the exact axis order of every table.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

FRAME_RATE_HZ = 4
FRAME_DT = 1.0 / FRAME_RATE_HZ
CELL_M = 1.0
N_BINS = 10
HDOP_GATE = 8.0
SPEED_BINS = (0.0, 0.5, 1.0, 1.5, 2.5, 4.0, 7.0, 12.0, 20.0)
N_HEADINGS = 8
ROW_TOL = 1e-6

PARAMS_FORMAT = "activitydbn-params/1"


class ParamsError(ValueError):
    """A parameter object violates a probability-table invariant."""


class ParseError(ValueError):
    """An input file could not be parsed."""


class MotionState(IntEnum):
    STATIONARY = 0
    WALKING = 1
    RUNNING = 2
    DRIVING_VEHICLE = 3
    UP_DOWN_STAIRS = 4


class Environment(IntEnum):
    INDOORS = 0
    OUTDOORS = 1
    VEHICLE = 2


class MapClass(IntEnum):
    INSIDE_BUILDING = 0
    OUTSIDE_BUILDING = 1


N_STATES = len(MotionState)
N_ENVS = len(Environment)

# Walking and stairs share one speed table; the other states own theirs.
SPEED_GROUP = (0, 1, 2, 3, 1)
N_SPEED_GROUPS = 4


def is_admissible(state: MotionState, env: Environment) -> bool:
    if state == MotionState.DRIVING_VEHICLE and env != Environment.VEHICLE:
        return False
    if state == MotionState.UP_DOWN_STAIRS and env == Environment.VEHICLE:
        return False
    return True


ADMISSIBLE = np.array(
    [[is_admissible(MotionState(s), Environment(e)) for e in range(N_ENVS)] for s in range(N_STATES)]
)
ADMISSIBLE.setflags(write=False)


def env_class(env: Environment) -> MapClass:
    """Map-constraint row for an environment; vehicles count as outside."""
    return MapClass.INSIDE_BUILDING if env == Environment.INDOORS else MapClass.OUTSIDE_BUILDING


@dataclass(frozen=True, order=True)
class GridLocation:
    x_cell: int
    y_cell: int

    def center(self) -> tuple[float, float]:
        return ((self.x_cell + 0.5) * CELL_M, (self.y_cell + 0.5) * CELL_M)


@dataclass(frozen=True, order=True)
class PolarVelocity:
    speed_bin: int
    heading_bin: int

    def __post_init__(self):
        if self.speed_bin < 0 or self.heading_bin < 0:
            raise ValueError(f"negative velocity index {self}")


@dataclass(frozen=True)
class GpsFix:
    x_m: float
    y_m: float
    hdop: float

    def __post_init__(self):
        if not self.hdop > 0:
            raise ValueError(f"hdop must be positive, got {self.hdop}")


@dataclass(frozen=True)
class MsbObservation:
    """Quantized classifier outputs: one bin per motion-state and environment detector."""

    state_bins: tuple[int, ...]
    env_bins: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "state_bins", tuple(int(b) for b in self.state_bins))
        object.__setattr__(self, "env_bins", tuple(int(b) for b in self.env_bins))
        if len(self.state_bins) != N_STATES or len(self.env_bins) != N_ENVS:
            raise ValueError(
                f"expected {N_STATES} state bins and {N_ENVS} env bins, "
                f"got {len(self.state_bins)} and {len(self.env_bins)}"
            )
        for b in self.state_bins + self.env_bins:
            if not 1 <= b <= N_BINS:
                raise ValueError(f"bin {b} outside 1..{N_BINS}")

    @classmethod
    def uniform(cls, value: int = 6) -> "MsbObservation":
        return cls((value,) * N_STATES, (value,) * N_ENVS)


@dataclass(frozen=True)
class Frame:
    index: int
    msb: MsbObservation
    gps: Optional[GpsFix] = None

    @property
    def gps_present(self) -> bool:
        """Sync indicator: a fix was snapped to this frame."""
        return self.gps is not None

    @property
    def gps_usable(self) -> bool:
        """Outlier indicator: present and hdop within the gate."""
        return self.gps is not None and self.gps.hdop <= HDOP_GATE


@dataclass(frozen=True, order=True)
class JointState:
    location: GridLocation
    velocity: PolarVelocity
    state: MotionState
    env: Environment

    def __post_init__(self):
        if not is_admissible(self.state, self.env):
            raise ValueError(f"{self.state.name} is not possible in environment {self.env.name}")

    def sort_key(self) -> tuple[int, ...]:
        return (
            self.location.x_cell,
            self.location.y_cell,
            self.velocity.speed_bin,
            self.velocity.heading_bin,
            int(self.state),
            int(self.env),
        )


@dataclass(frozen=True)
class LabelSpan:
    start_frame: int
    end_frame: int
    state: MotionState
    env: Environment

    def __post_init__(self):
        if self.start_frame < 0 or self.end_frame < self.start_frame:
            raise ValueError(f"bad span bounds {self.start_frame}..{self.end_frame}")
        object.__setattr__(self, "state", MotionState(self.state))
        object.__setattr__(self, "env", Environment(self.env))
        if not is_admissible(self.state, self.env):
            raise ValueError(f"span label ({self.state.name}, {self.env.name}) is forbidden")

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame + 1


def check_spans(spans: Iterable[LabelSpan]) -> list[LabelSpan]:
    spans = list(spans)
    for a, b in zip(spans, spans[1:]):
        if b.start_frame <= a.end_frame:
            raise ValueError(f"spans overlap or are out of order: {a} then {b}")
    return spans


def spans_from_labels(states: Iterable[int], envs: Iterable[int]) -> list[LabelSpan]:
    """Collapse per-frame labels into maximal constant blocks."""
    labels = list(zip(states, envs))
    spans = []
    start = 0
    for k in range(1, len(labels) + 1):
        if k == len(labels) or labels[k] != labels[start]:
            s, e = labels[start]
            spans.append(LabelSpan(start, k - 1, MotionState(s), Environment(e)))
            start = k
    return spans


@dataclass(frozen=True)
class Building:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self):
        if self.max_x < self.min_x or self.max_y < self.min_y:
            raise ValueError(f"degenerate building box {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.min_x <= x <= self.max_x and self.min_y <= y <= self.max_y

    def distance(self, x: float, y: float) -> float:
        dx = max(self.min_x - x, 0.0, x - self.max_x)
        dy = max(self.min_y - y, 0.0, y - self.max_y)
        return math.hypot(dx, dy)


@dataclass(frozen=True)
class BuildingMap:
    width: int
    height: int
    buildings: tuple[Building, ...] = ()
    _inside: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("world must have at least one cell")
        object.__setattr__(self, "buildings", tuple(self.buildings))
        for b in self.buildings:
            if b.min_x < 0 or b.min_y < 0 or b.max_x > self.width * CELL_M or b.max_y > self.height * CELL_M:
                raise ValueError(f"building {b} leaves the {self.width}x{self.height} world")
        cx = (np.arange(self.width) + 0.5) * CELL_M
        cy = (np.arange(self.height) + 0.5) * CELL_M
        inside = np.zeros((self.width, self.height), dtype=bool)
        for b in self.buildings:
            inside |= ((cx >= b.min_x) & (cx <= b.max_x))[:, None] & ((cy >= b.min_y) & (cy <= b.max_y))[None, :]
        inside.setflags(write=False)
        object.__setattr__(self, "_inside", inside)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def inside_mask(self) -> np.ndarray:
        """Boolean (width, height) grid, True where the cell center is in a building."""
        return self._inside

    def in_bounds(self, loc: GridLocation) -> bool:
        return 0 <= loc.x_cell < self.width and 0 <= loc.y_cell < self.height

    def to_dict(self) -> dict:
        return {
            "world": {"width_m": self.width * CELL_M, "height_m": self.height * CELL_M, "cell_m": CELL_M},
            "buildings": [{"min": [b.min_x, b.min_y], "max": [b.max_x, b.max_y]} for b in self.buildings],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BuildingMap":
        try:
            world = data["world"]
            if float(world.get("cell_m", CELL_M)) != CELL_M:
                raise ParseError(f"only {CELL_M} m cells are supported")
            width = int(round(float(world["width_m"]) / CELL_M))
            height = int(round(float(world["height_m"]) / CELL_M))
            boxes = tuple(
                Building(float(b["min"][0]), float(b["min"][1]), float(b["max"][0]), float(b["max"][1]))
                for b in data.get("buildings", [])
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ParseError(f"malformed map: {exc!r}") from exc
        return cls(width, height, boxes)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "BuildingMap":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(data)


def map_class(location: GridLocation, bmap: BuildingMap) -> MapClass:
    if not bmap.in_bounds(location):
        raise ValueError(f"{location} is outside the {bmap.width}x{bmap.height} world")
    if bmap.inside_mask[location.x_cell, location.y_cell]:
        return MapClass.INSIDE_BUILDING
    return MapClass.OUTSIDE_BUILDING


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

_CPT_FIELDS = (
    "env_trans",
    "state_trans",
    "heading_trans",
    "speed_trans",
    "obs_state",
    "obs_env",
    "init_env",
    "init_state",
    "init_speed",
    "init_heading",
    "init_location",
)


def structural_masks(pairs: np.ndarray) -> dict[str, np.ndarray]:
    """Where each CPT may be non-zero, given the admissible (state, env) pairs.

    Environments with no admissible state are unreachable.  Their
    ``state_trans`` / ``init_state`` rows are never used but still have to
    be distributions, so they fall back to the global admissibility rule.
    """
    pairs = np.asarray(pairs, dtype=bool)
    active_env = pairs.any(axis=0)
    se_mask = np.where(active_env[None, :], pairs, ADMISSIBLE)  # (s, e)
    return {
        "env": active_env,
        "env_trans": np.broadcast_to(active_env[None, :], (N_ENVS, N_ENVS)),
        "state_trans": np.broadcast_to(se_mask.T[None, :, :], (N_STATES, N_ENVS, N_STATES)),
        "init_state": se_mask.T,
    }


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Every table of the DBN.

    Axis order (child last):

    - ``env_trans[e_prev, e]``
    - ``state_trans[s_prev, e, s]``
    - ``heading_trans[s, offset]`` with offset ``j - n_headings // 2`` sectors
    - ``speed_trans[group, speed_prev, speed]``
    - ``obs_state[classifier, s, bin - 1]`` and ``obs_env[classifier, e, bin - 1]``
    - ``map_cpt[env_class, map_class]`` holds p(c = 1 | ...), not a distribution
    - ``init_state[e, s]``, ``init_location[x, y]``
    """

    env_trans: np.ndarray
    state_trans: np.ndarray
    heading_trans: np.ndarray
    speed_trans: np.ndarray
    obs_state: np.ndarray
    obs_env: np.ndarray
    map_cpt: np.ndarray
    init_env: np.ndarray
    init_state: np.ndarray
    init_speed: np.ndarray
    init_heading: np.ndarray
    init_location: np.ndarray
    gps_exponent: float = 0.5
    speed_bins: tuple[float, ...] = SPEED_BINS
    pairs: np.ndarray = field(default_factory=lambda: ADMISSIBLE.copy())

    def __post_init__(self):
        for name in _CPT_FIELDS + ("map_cpt",):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        pairs = np.array(self.pairs, dtype=bool)
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "speed_bins", tuple(float(v) for v in self.speed_bins))
        object.__setattr__(self, "gps_exponent", float(self.gps_exponent))
        self.validate()

    @property
    def n_speeds(self) -> int:
        return len(self.speed_bins)

    @property
    def n_headings(self) -> int:
        return self.heading_trans.shape[1]

    @property
    def world_shape(self) -> tuple[int, int]:
        return self.init_location.shape

    def replace(self, **changes) -> "ModelParams":
        fields_ = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields_.update(changes)
        return ModelParams(**fields_)

    def validate(self, tol: float = ROW_TOL) -> None:
        nsp, nh = self.n_speeds, self.n_headings
        expected = {
            "env_trans": (N_ENVS, N_ENVS),
            "state_trans": (N_STATES, N_ENVS, N_STATES),
            "heading_trans": (N_STATES, nh),
            "speed_trans": (N_SPEED_GROUPS, nsp, nsp),
            "obs_state": (N_STATES, N_STATES, N_BINS),
            "obs_env": (N_ENVS, N_ENVS, N_BINS),
            "map_cpt": (2, 2),
            "init_env": (N_ENVS,),
            "init_state": (N_ENVS, N_STATES),
            "init_speed": (nsp,),
            "init_heading": (nh,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ParamsError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.init_location.ndim != 2:
            raise ParamsError("init_location must be a (width, height) grid")
        if self.pairs.shape != (N_STATES, N_ENVS):
            raise ParamsError("pairs must be a 5x3 boolean table")
        if (self.pairs & ~ADMISSIBLE).any():
            raise ParamsError("pairs admits a forbidden (state, env) combination")
        if not self.pairs.any():
            raise ParamsError("pairs admits nothing")
        if not self.speed_bins or self.speed_bins[0] != 0.0:
            raise ParamsError("speed_bins must start at 0")
        if not self.gps_exponent > 0:
            raise ParamsError("gps_exponent must be positive")
        if not np.all((self.map_cpt >= 0) & (self.map_cpt <= 1)):
            raise ParamsError("map_cpt entries must lie in [0, 1]")
        for name in _CPT_FIELDS:
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ParamsError(f"{name} has non-finite entries")
            if (arr < 0).any():
                idx = tuple(int(i) for i in np.argwhere(arr < 0)[0])
                raise ParamsError(f"{name}{list(idx)} is negative")
            sums = arr.sum() if name == "init_location" else arr.sum(axis=-1)
            bad = np.abs(np.asarray(sums) - 1.0) > tol
            if np.any(bad):
                if name == "init_location":
                    raise ParamsError(f"init_location sums to {float(sums)!r}")
                row = tuple(int(i) for i in np.argwhere(bad)[0])
                raise ParamsError(f"{name} row {list(row)} sums to {float(sums[row])!r}")
        masks = structural_masks(self.pairs)
        for name in ("env_trans", "state_trans", "init_state"):
            if (getattr(self, name)[~masks[name]] != 0).any():
                raise ParamsError(f"{name} has mass on a structural zero")
        if (self.init_env[~masks["env"]] != 0).any():
            raise ParamsError("init_env has mass on an unreachable environment")

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact equality of every table and constant."""
        if not isinstance(other, ModelParams):
            return False
        if self.speed_bins != other.speed_bins or self.gps_exponent != other.gps_exponent:
            return False
        return all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in _CPT_FIELDS + ("map_cpt", "pairs")
        )

    def to_dict(self) -> dict:
        out = {
            "format": PARAMS_FORMAT,
            "speed_bins": list(self.speed_bins),
            "gps_exponent": self.gps_exponent,
            "admissible_pairs": self.pairs.tolist(),
            "map_cpt": self.map_cpt.tolist(),
        }
        for name in _CPT_FIELDS:
            out[name] = getattr(self, name).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        if data.get("format") != PARAMS_FORMAT:
            raise ParseError(f"unknown params format {data.get('format')!r}")
        try:
            kwargs = {name: np.array(data[name], dtype=float) for name in _CPT_FIELDS + ("map_cpt",)}
            kwargs["speed_bins"] = tuple(data["speed_bins"])
            kwargs["gps_exponent"] = data["gps_exponent"]
            kwargs["pairs"] = np.array(data["admissible_pairs"], dtype=bool)
        except KeyError as exc:
            raise ParseError(f"params missing field {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise ParseError(f"params field is not a numeric array: {exc}") from exc
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_bytes(serialize_params(self))

    @classmethod
    def load(cls, path) -> "ModelParams":
        return parse_params(Path(path).read_bytes())


def serialize_params(params: ModelParams) -> bytes:
    return json.dumps(params.to_dict()).encode()


def parse_params(blob: bytes) -> ModelParams:
    try:
        data = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ParseError("params stream must hold a JSON object")
    return ModelParams.from_dict(data)


def default_map_cpt() -> np.ndarray:
    cpt = np.empty((2, 2))
    cpt[MapClass.INSIDE_BUILDING, MapClass.INSIDE_BUILDING] = 0.6
    cpt[MapClass.INSIDE_BUILDING, MapClass.OUTSIDE_BUILDING] = 0.4
    cpt[MapClass.OUTSIDE_BUILDING, MapClass.OUTSIDE_BUILDING] = 0.85
    cpt[MapClass.OUTSIDE_BUILDING, MapClass.INSIDE_BUILDING] = 0.15
    return cpt
