"""Boosted decision stumps and the margin -> probability -> bin pipeline.

Each motion state and environment gets its own one-vs-rest ensemble.  An
ensemble turns a feature vector into a detection probability by averaging
the signed distances to its stump thresholds (weighted by the boosting
coefficients) and squashing the result with a sigmoid.  The probabilities
are then quantized uniformly into ``N_BINS`` bins, which is the observation
the DBN consumes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .model import N_BINS, N_ENVS, N_STATES, Environment, MotionState, MsbObservation, ParseError

Label = Union[MotionState, Environment]

DEFAULT_ROUNDS = 50
_EPS_FLOOR = 1e-10


class NoSplitError(ValueError):
    """All samples are identical in every feature."""


class BoostingStallError(ValueError):
    """No stump beats chance on the current sample weights."""


@dataclass(frozen=True)
class DecisionStump:
    feature_index: int
    threshold: float
    polarity: int  # +1: predict positive above the threshold
    weight: float = 1.0
    scale: float = 1.0  # feature standard deviation used to normalize distances
    error: float = float("nan")

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.where(X[:, self.feature_index] > self.threshold, self.polarity, -self.polarity)

    def signed_distance(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return (X[:, self.feature_index] - self.threshold) / self.scale


@dataclass(frozen=True)
class StumpEnsemble:
    target: str
    stumps: tuple[DecisionStump, ...]
    sigmoid_scale: float = 1.0
    train_errors: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "stumps", tuple(self.stumps))
        if not self.stumps:
            raise ValueError("an ensemble needs at least one stump")
        if not self.sigmoid_scale > 0:
            raise ValueError("sigmoid_scale must be positive")

    @property
    def n_features_required(self) -> int:
        return max(s.feature_index for s in self.stumps) + 1

    def decision(self, X: np.ndarray) -> np.ndarray:
        """Weighted vote sign(sum_t alpha_t h_t(x)), with ties going to +1."""
        X = np.atleast_2d(X)
        score = sum(s.weight * s.predict(X) for s in self.stumps)
        return np.where(score >= 0, 1, -1)

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] < self.n_features_required:
            raise ValueError(f"feature vector has {X.shape[1]} entries, ensemble needs {self.n_features_required}")
        total = sum(s.weight for s in self.stumps)
        return sum(s.weight * s.polarity * s.signed_distance(X) for s in self.stumps) / total

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "sigmoid_scale": self.sigmoid_scale,
            "stumps": [
                {
                    "feature_index": s.feature_index,
                    "threshold": s.threshold,
                    "polarity": s.polarity,
                    "weight": s.weight,
                    "scale": s.scale,
                }
                for s in self.stumps
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StumpEnsemble":
        stumps = tuple(
            DecisionStump(
                int(s["feature_index"]), float(s["threshold"]), int(s["polarity"]), float(s["weight"]), float(s.get("scale", 1.0))
            )
            for s in data["stumps"]
        )
        return cls(data["target"], stumps, float(data.get("sigmoid_scale", 1.0)))


def train_stump(X, y, w) -> DecisionStump:
    """Exhaustive weighted stump search.

    Candidate thresholds are midpoints between consecutive distinct values
    of each feature.  Ties are resolved toward the lowest feature index,
    then the lowest threshold, then polarity +1.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    w = np.asarray(w, dtype=float)
    if X.shape[0] != len(y) or len(y) != len(w):
        raise ValueError("X, y and w disagree on the number of samples")
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("sample weights must be non-negative with a positive sum")
    if not ((y == 1).any() and (y == -1).any()):
        raise ValueError("need samples of both labels")
    w = w / w.sum()

    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys, ws = X[order, f], y[order], w[order]
        cuts = np.flatnonzero(np.diff(xs) > 0)
        if cuts.size == 0:
            continue
        # error of polarity +1 (positive above the cut): positives at or below + negatives above
        pos_below = np.cumsum(ws * (ys == 1))[cuts]
        neg_below = np.cumsum(ws * (ys == -1))[cuts]
        neg_total = ws[ys == -1].sum()
        err_pos = pos_below + (neg_total - neg_below)
        err_neg = 1.0 - err_pos
        thresholds = 0.5 * (xs[cuts] + xs[cuts + 1])
        for errs, polarity in ((err_pos, 1), (err_neg, -1)):
            i = int(np.argmin(errs))
            cand = (float(errs[i]), f, float(thresholds[i]), polarity)
            if best is None or _better(cand, best):
                best = cand
    if best is None:
        raise NoSplitError("all samples are identical in every feature")
    err, f, thr, pol = best
    if err >= 0.5:
        raise BoostingStallError(f"best weighted error {err:.6f} is not below 0.5")
    return DecisionStump(f, thr, pol, 1.0, 1.0, max(err, 0.0))


def _better(a, b) -> bool:
    # a, b = (error, feature, threshold, polarity); strict improvement first
    if a[0] < b[0] - 1e-15:
        return True
    if a[0] > b[0] + 1e-15:
        return False
    return (a[1], a[2], -a[3]) < (b[1], b[2], -b[3])


def train_adaboost(X, y, rounds: int = DEFAULT_ROUNDS, target: str = "", sigmoid_scale: float = 1.0) -> StumpEnsemble:
    """Discrete AdaBoost over decision stumps.

    Stops early when a stump is perfect on the weighted data or when no
    stump beats chance; the stumps found so far are kept.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    n = len(y)
    scales = X.std(axis=0)
    scales[scales == 0] = 1.0
    w = np.full(n, 1.0 / n)
    stumps: list[DecisionStump] = []
    errors: list[float] = []
    score = np.zeros(n)
    for _ in range(rounds):
        try:
            stump = train_stump(X, y, w)
        except (NoSplitError, BoostingStallError):
            if not stumps:
                raise
            break
        eps = max(stump.error, _EPS_FLOOR)
        alpha = 0.5 * math.log((1.0 - eps) / eps)
        stump = DecisionStump(stump.feature_index, stump.threshold, stump.polarity, alpha, float(scales[stump.feature_index]), stump.error)
        stumps.append(stump)
        h = stump.predict(X)
        score += alpha * h
        errors.append(float(np.mean(np.where(score >= 0, 1, -1) != y)))
        if stump.error == 0.0:
            break
        w = w * np.exp(-alpha * y * h)
        w /= w.sum()
    return StumpEnsemble(target, tuple(stumps), sigmoid_scale, tuple(errors))


def detection_probability(ensemble: StumpEnsemble, x) -> float:
    m = float(ensemble.margin(np.asarray(x, dtype=float))[0])
    return _sigmoid(ensemble.sigmoid_scale * m)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def quantize(p: float, b: int = N_BINS) -> int:
    """Uniform bins [0, 1/b), [1/b, 2/b), ..., with the top bin closed at 1."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    return min(int(math.floor(p * b)) + 1, b)


def quantize_array(p, b: int = N_BINS) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if ((p < 0) | (p > 1)).any():
        raise ValueError("probabilities outside [0, 1]")
    return np.minimum(np.floor(p * b).astype(int) + 1, b)


def featurize_frame(ensembles: Sequence[StumpEnsemble], x) -> MsbObservation:
    """Run the 5 motion-state and 3 environment detectors on one feature vector."""
    if len(ensembles) != N_STATES + N_ENVS:
        raise ValueError(f"need {N_STATES + N_ENVS} ensembles, got {len(ensembles)}")
    bins = [quantize(detection_probability(e, x)) for e in ensembles]
    return MsbObservation(tuple(bins[:N_STATES]), tuple(bins[N_STATES:]))


def train_detectors(X, state_labels, env_labels, rounds: int = DEFAULT_ROUNDS) -> list[StumpEnsemble]:
    """One-vs-rest ensembles in MotionState then Environment order."""
    X = np.asarray(X, dtype=float)
    state_labels = np.asarray(state_labels)
    env_labels = np.asarray(env_labels)
    out = []
    for s in MotionState:
        out.append(train_adaboost(X, np.where(state_labels == s, 1, -1), rounds, target=s.name))
    for e in Environment:
        out.append(train_adaboost(X, np.where(env_labels == e, 1, -1), rounds, target=e.name))
    return out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

@dataclass
class FeatureTable:
    names: list[str]
    X: np.ndarray
    state_labels: np.ndarray | None = None
    env_labels: np.ndarray | None = None


def read_feature_csv(path) -> FeatureTable:
    """Feature CSV: header row, one row per frame, optional ``label_state``/``label_env``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty feature file") from None
        label_cols = {name: i for i, name in enumerate(header) if name in ("label_state", "label_env")}
        feat_cols = [i for i, name in enumerate(header) if name not in label_cols]
        rows, states, envs = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in feat_cols])
                if "label_state" in label_cols:
                    states.append(int(MotionState[row[label_cols["label_state"]]]))
                if "label_env" in label_cols:
                    envs.append(int(Environment[row[label_cols["label_env"]]]))
            except (ValueError, KeyError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return FeatureTable(
        [header[i] for i in feat_cols],
        np.array(rows, dtype=float).reshape(len(rows), len(feat_cols)),
        np.array(states) if states else None,
        np.array(envs) if envs else None,
    )


def write_feature_csv(path, table: FeatureTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = list(table.names)
        if table.state_labels is not None:
            header.append("label_state")
        if table.env_labels is not None:
            header.append("label_env")
        writer.writerow(header)
        for k, row in enumerate(table.X):
            out = [repr(float(v)) for v in row]
            if table.state_labels is not None:
                out.append(MotionState(int(table.state_labels[k])).name)
            if table.env_labels is not None:
                out.append(Environment(int(table.env_labels[k])).name)
            writer.writerow(out)


def save_ensembles(path, ensembles: Sequence[StumpEnsemble]) -> None:
    Path(path).write_text(json.dumps([e.to_dict() for e in ensembles], indent=1))


def load_ensembles(path) -> list[StumpEnsemble]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    return [StumpEnsemble.from_dict(d) for d in data]
