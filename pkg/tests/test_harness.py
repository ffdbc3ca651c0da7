import json
import math

import numpy as np
import pytest

from activitydbn.cli import main
from activitydbn.harness import (
    ABLATION_ROWS,
    ConfigError,
    ModelKind,
    TrainConfig,
    accuracy_summary,
    adaboost_argmax,
    as_labeled,
    decoded_to_csv,
    emit_trace_plot,
    evaluate_accuracy,
    forbidden_frames,
    indoor_outside_fraction,
    ingest_trace,
    labels_from_spans,
    project_equirectangular,
    read_decoded_csv,
    run_ablation,
    sticky_motion,
    write_trace,
)
from activitydbn.inference import BeamConfig
from activitydbn.learning import initialize_params
from activitydbn.model import (
    ADMISSIBLE,
    Building,
    BuildingMap,
    Environment,
    Frame,
    GpsFix,
    GridLocation,
    JointState,
    MotionState,
    MsbObservation,
    ParseError,
    PolarVelocity,
)
from activitydbn.simulator import SimConfig, generate_dataset

TINY_SIM = {
    "width": 40, "height": 40, "n_buildings": 1, "building_size": [8, 10],
    "drive_margin": 5, "corridor_m": 4, "segment_s": [10.0, 30.0],
}


def write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")


def msb(k):
    return {"type": "msb", "frame": k, "state_bins": [1, 2, 3, 4, 5], "env_bins": [6, 7, 8]}


class TestProjection:
    def test_origin(self):
        assert project_equirectangular(47.6, -122.3, 47.6, -122.3) == (0.0, 0.0)

    def test_north(self):
        x, y = project_equirectangular(47.601, -122.3, 47.6, -122.3)
        assert x == 0.0
        assert y == pytest.approx(111.19, abs=0.005)
        assert y == pytest.approx(6_371_000 * math.radians(0.001))

    def test_east_shrinks_with_latitude(self):
        x, _ = project_equirectangular(60.0, 0.001, 60.0, 0.0)
        assert x == pytest.approx(111.19 * 0.5, abs=0.01)


class TestIngest:
    bmap = BuildingMap(50, 50)

    def test_metric_passthrough(self, tmp_path):
        frames = [Frame(0, MsbObservation((1, 2, 3, 4, 5), (6, 7, 8)), GpsFix(3.0, 4.0, 1.5)), Frame(1, MsbObservation.uniform())]
        write_trace(tmp_path / "t.jsonl", frames)
        res = ingest_trace(tmp_path / "t.jsonl", self.bmap)
        assert res.frames == frames and res.dropped_fixes == 0

    def test_snap_and_merge(self, tmp_path):
        recs = [msb(k) for k in range(4)]
        recs += [
            {"type": "gps", "t": 0.27, "x": 1.0, "y": 1.0, "hdop": 1.0},
            {"type": "gps", "t": 0.24, "x": 2.0, "y": 2.0, "hdop": 1.0},
            {"type": "gps", "t": 0.70, "x": 99.0, "y": 2.0, "hdop": 1.0},
        ]
        write_jsonl(tmp_path / "t.jsonl", recs)
        res = ingest_trace(tmp_path / "t.jsonl", self.bmap)
        assert res.frames[1].gps.x_m == 2.0
        assert res.merged_fixes == 1 and res.dropped_fixes == 1

    def test_latlon_needs_reference(self, tmp_path):
        write_jsonl(tmp_path / "t.jsonl", [msb(0), {"type": "gps", "t": 0, "lat": 1.0, "lon": 2.0, "hdop": 1.0}])
        with pytest.raises(ConfigError):
            ingest_trace(tmp_path / "t.jsonl", self.bmap)

    def test_latlon_projected(self, tmp_path):
        write_jsonl(tmp_path / "t.jsonl", [
            {"type": "header", "reference": {"lat": 10.0, "lon": 20.0}},
            msb(0),
            {"type": "gps", "t": 0, "lat": 10.0001, "lon": 20.0, "hdop": 1.0},
        ])
        fix = ingest_trace(tmp_path / "t.jsonl", self.bmap).frames[0].gps
        assert fix.x_m == 0.0 and fix.y_m == pytest.approx(11.119, abs=1e-3)

    def test_parse_error_line(self, tmp_path):
        (tmp_path / "t.jsonl").write_text(json.dumps(msb(0)) + "\n{oops\n")
        with pytest.raises(ParseError, match="line 2"):
            ingest_trace(tmp_path / "t.jsonl", self.bmap)

    def test_bad_bin(self, tmp_path):
        rec = msb(0)
        rec["state_bins"] = [0, 1, 1, 1, 1]
        write_jsonl(tmp_path / "t.jsonl", [rec])
        with pytest.raises(ParseError, match="line 1"):
            ingest_trace(tmp_path / "t.jsonl", self.bmap)

    def test_missing_frame(self, tmp_path):
        write_jsonl(tmp_path / "t.jsonl", [msb(0), msb(2)])
        with pytest.raises(ParseError, match="frame 1"):
            ingest_trace(tmp_path / "t.jsonl", self.bmap)


class TestAccuracy:
    def test_perfect(self):
        acc = evaluate_accuracy([[0, 1, 2]] * 3, [[0, 1, 2]] * 3)
        assert acc.mean == 1.0 and acc.ci95 == 0.0

    def test_half(self):
        assert evaluate_accuracy([[0, 0, 1, 1]], [[0, 1, 1, 0]]).mean == 0.5

    def test_ci(self):
        acc = accuracy_summary([0.8, 0.9, 1.0])
        assert acc.mean == pytest.approx(0.9)
        assert acc.ci95 == pytest.approx(1.96 * 0.1 / math.sqrt(3))
        assert acc.ci95 == pytest.approx(0.1132, abs=5e-5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_accuracy([[0, 1]], [[0, 1, 2]])

    def test_forbidden(self):
        assert forbidden_frames([MotionState.DRIVING_VEHICLE, MotionState.WALKING], [Environment.INDOORS] * 2) == 1

    def test_adaboost_argmax_ties_low(self):
        f = Frame(0, MsbObservation((3, 7, 7, 1, 1), (5, 5, 2)))
        s, e = adaboost_argmax([f])
        assert (s[0], e[0]) == (1, 0)

    def test_labels_from_spans_gap(self):
        from activitydbn.model import LabelSpan

        with pytest.raises(ValueError, match="frame 2"):
            labels_from_spans([LabelSpan(0, 1, MotionState.WALKING, Environment.OUTDOORS)], 3)


class TestVariants:
    def test_factor_nesting(self):
        f = [ModelKind.JOINT_MSB.factors, ModelKind.JOINT_MSB_GPS.factors, ModelKind.FULL.factors]
        used = [{n for n in ("gps", "map") if getattr(x, n)} for x in f]
        assert used[0] < used[1] < used[2]

    def test_collapsed_pairs(self):
        assert ModelKind.STATE_MSB.pairs.sum(axis=1).tolist() == [1] * 5
        assert ModelKind.ENV_MSB.pairs.sum(axis=0).tolist() == [1] * 3
        assert (ModelKind.STATE_MSB.pairs <= ADMISSIBLE).all()
        assert (ModelKind.ENV_MSB.pairs <= ADMISSIBLE).all()

    def test_sticky_motion(self):
        p = initialize_params(0, 2, 2, (0.0, 1.0, 2.0), 4)
        q = sticky_motion(p, 0.5)
        assert np.allclose(q.speed_trans.sum(-1), 1) and np.allclose(q.heading_trans.sum(-1), 1)
        assert (np.diagonal(q.speed_trans, axis1=1, axis2=2) > 0.5).all()
        assert (q.heading_trans[:, 2] > 0.5).all()
        assert sticky_motion(p, 0.0) is p
        with pytest.raises(ValueError):
            sticky_motion(p, 1.5)


class TestPlot:
    def test_straight_path_one_polyline(self):
        bmap = BuildingMap(10, 10)
        cells = np.array([[k, 5] for k in range(5)])
        frames = [Frame(k, MsbObservation.uniform()) for k in range(5)]
        svg, table = emit_trace_plot(cells, [1] * 5, [1] * 5, frames, bmap)
        assert svg.count("<polyline") == 1
        assert len(table.strip().splitlines()) == 6

    def test_style_switch_at_env_flip(self):
        bmap = BuildingMap(10, 10, (Building(4, 0, 8, 10),))
        cells = np.array([[k, 5] for k in range(8)])
        envs = [1, 1, 1, 1, 0, 0, 0, 0]
        frames = [Frame(k, MsbObservation.uniform(), GpsFix(k + 0.5, 5.5, 1.0) if k % 2 == 0 else None) for k in range(8)]
        svg, table = emit_trace_plot(cells, envs, [1] * 8, frames, bmap)
        outside = [l for l in svg.splitlines() if "path-outside" in l]
        inside = [l for l in svg.splitlines() if "path-inside" in l]
        assert len(outside) == 1 and len(inside) == 1
        # the outdoor stroke ends on the first indoor frame's cell
        assert outside[0].split('points="')[1].rstrip('"/>').split()[-1] == "18.00,18.00"
        assert svg.count('class="fix"') == 4
        assert 'class="building"' in svg
        rows = table.strip().splitlines()
        assert rows[0] == "frame,x,y,state,env,gps_x,gps_y"
        assert rows[5].split(",")[4] == "INDOORS"

    def test_indoor_outside_fraction(self):
        bmap = BuildingMap(10, 10, (Building(0, 0, 5, 10),))
        cells = np.array([[1, 1], [7, 1], [7, 1], [7, 1]])
        assert indoor_outside_fraction(cells, [0, 0, 1, 1], bmap) == 0.25


class TestDecodedCsv:
    def test_round_trip(self, tmp_path):
        path = [
            JointState(GridLocation(1, 2), PolarVelocity(0, 3), MotionState.WALKING, Environment.OUTDOORS),
            JointState(GridLocation(1, 3), PolarVelocity(1, 3), MotionState.STATIONARY, Environment.INDOORS),
        ]
        (tmp_path / "d.csv").write_text(decoded_to_csv(path))
        cells, s, e = read_decoded_csv(tmp_path / "d.csv")
        assert cells.tolist() == [[1, 2], [1, 3]]
        assert s.tolist() == [1, 0] and e.tolist() == [1, 0]


class TestAblationSmoke:
    def test_rows_and_safety(self):
        cfg = SimConfig(seed=5, **{k: tuple(v) if isinstance(v, list) else v for k, v in TINY_SIM.items()})
        world, traces = generate_dataset(cfg, 3, 400)
        labeled = [as_labeled(t) for t in traces]
        config = TrainConfig(train_beam=BeamConfig(max_states=100), decode_beam=BeamConfig(max_states=100))
        res = run_ablation(labeled, world, config)
        assert tuple(res.rows) == ABLATION_ROWS
        for name, paths in res.decoded.items():
            if name in ("adaboost", "single-msb"):
                # per-variable predictions combined after the fact carry no joint constraint
                continue
            for s, e in paths:
                assert forbidden_frames(s, e) == 0, name
        assert "row,state_mean" in res.to_csv()

    def test_unknown_row(self):
        with pytest.raises(ValueError):
            run_ablation([], BuildingMap(1, 1), rows=("bogus",))


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    (d / "cfg.json").write_text(json.dumps({"simulator": TINY_SIM, "train": {"train_beam": 60, "decode_beam": 60}}))
    assert main(["simulate", "--config", str(d / "cfg.json"), "--seed", "2", "--traces", "2", "--frames", "240", "--out", str(d / "data")]) == 0
    return d


class TestCli:
    def test_simulate_outputs(self, sim_dir):
        names = sorted(p.name for p in (sim_dir / "data").iterdir())
        assert names == ["labels_00.json", "labels_01.json", "map.json", "simulator.json", "trace_00.jsonl",
                         "trace_01.jsonl", "truth_00.json", "truth_01.json"]

    def test_train_decode_evaluate_plot(self, sim_dir, capsys):
        d = sim_dir / "data"
        cfg = str(sim_dir / "cfg.json")
        common = ["--config", cfg, "--seed", "0"]
        assert main(["train", *common, "--map", str(d / "map.json"), "--traces", str(d / "trace_00.jsonl"),
                     "--labels", str(d / "labels_00.json"), "--out", str(sim_dir / "p.json")]) == 0
        assert main(["decode", *common, "--map", str(d / "map.json"), "--params", str(sim_dir / "p.json"),
                     "--trace", str(d / "trace_01.jsonl"), "--out", str(sim_dir / "dec.csv")]) == 0
        assert main(["evaluate", "--decoded", str(sim_dir / "dec.csv"), "--labels", str(d / "labels_01.json"),
                     "--out", str(sim_dir / "eval.csv")]) == 0
        lines = (sim_dir / "eval.csv").read_text().splitlines()
        assert lines[0] == "variable,mean,ci95" and lines[1].startswith("state,")
        assert main(["plot", "--map", str(d / "map.json"), "--trace", str(d / "trace_01.jsonl"),
                     "--decoded", str(sim_dir / "dec.csv"), "--svg", str(sim_dir / "p.svg"), "--csv", str(sim_dir / "p.csv")]) == 0
        assert (sim_dir / "p.svg").read_text().startswith("<svg")
        assert len((sim_dir / "p.csv").read_text().splitlines()) == 241

    def test_validation_exit_code(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{")
        assert main(["simulate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_setting(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"train": {"bogus": 1}}))
        assert main(["ablate", "--config", str(tmp_path / "c.json"), "--traces", "2", "--frames", "10"]) == 2

    def test_collapse_exit_code(self, sim_dir, tmp_path):
        d = sim_dir / "data"
        bmap = BuildingMap.load(d / "map.json")
        # every environment insists on being inside a building, but the only start cell is outside
        p = initialize_params(0, bmap.width, bmap.height, (0.0,), 1)
        loc = np.zeros((bmap.width, bmap.height))
        loc[0, 0] = 1.0
        p = p.replace(init_location=loc, map_cpt=np.array([[1.0, 0.0], [1.0, 0.0]]))
        p.save(tmp_path / "p.json")
        write_jsonl(tmp_path / "t.jsonl", [msb(0), msb(1)])
        rc = main(["decode", "--map", str(d / "map.json"), "--params", str(tmp_path / "p.json"),
                   "--trace", str(tmp_path / "t.jsonl"), "--out", str(tmp_path / "d.csv")])
        assert rc == 3
