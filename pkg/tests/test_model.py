import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activitydbn.model import (
    ADMISSIBLE,
    N_SPEED_GROUPS,
    SPEED_GROUP,
    Building,
    BuildingMap,
    Environment,
    Frame,
    GpsFix,
    GridLocation,
    JointState,
    LabelSpan,
    MapClass,
    ModelParams,
    MotionState,
    MsbObservation,
    ParamsError,
    ParseError,
    PolarVelocity,
    check_spans,
    map_class,
    parse_params,
    serialize_params,
    spans_from_labels,
    structural_masks,
)
from oracles import random_params


class TestAdmissibility:
    def test_twelve_pairs(self):
        # driving needs a vehicle and stairs never happen in one: 15 - 3
        assert ADMISSIBLE.sum() == 12

    def test_forbidden_pairs(self):
        assert not ADMISSIBLE[MotionState.DRIVING_VEHICLE, Environment.INDOORS]
        assert not ADMISSIBLE[MotionState.UP_DOWN_STAIRS, Environment.VEHICLE]

    def test_joint_state_rejects_forbidden(self):
        with pytest.raises(ValueError):
            JointState(GridLocation(0, 0), PolarVelocity(0, 0), MotionState.DRIVING_VEHICLE, Environment.INDOORS)

    def test_speed_groups_cover_states(self):
        assert len(SPEED_GROUP) == len(MotionState)
        assert set(SPEED_GROUP) == set(range(N_SPEED_GROUPS))
        # walking and stairs share a speed profile
        assert SPEED_GROUP[MotionState.WALKING] == SPEED_GROUP[MotionState.UP_DOWN_STAIRS]

    def test_sort_key_orders_location_first(self):
        a = JointState(GridLocation(0, 1), PolarVelocity(5, 5), MotionState.RUNNING, Environment.OUTDOORS)
        b = JointState(GridLocation(1, 0), PolarVelocity(0, 0), MotionState.STATIONARY, Environment.INDOORS)
        assert a.sort_key() < b.sort_key()


class TestObservations:
    def test_bin_range(self):
        with pytest.raises(ValueError):
            MsbObservation((0, 1, 1, 1, 1), (1, 1, 1))
        with pytest.raises(ValueError):
            MsbObservation((1,) * 5, (11, 1, 1))

    def test_bin_count(self):
        with pytest.raises(ValueError):
            MsbObservation((1,) * 4, (1,) * 3)

    def test_hdop_positive(self):
        with pytest.raises(ValueError):
            GpsFix(0, 0, 0.0)

    def test_gps_flags(self):
        msb = MsbObservation.uniform()
        assert not Frame(0, msb).gps_present
        assert Frame(0, msb, GpsFix(1, 1, 9)).gps_present
        assert not Frame(0, msb, GpsFix(1, 1, 9)).gps_usable
        assert Frame(0, msb, GpsFix(1, 1, 8)).gps_usable


class TestSpans:
    def test_from_labels(self):
        spans = spans_from_labels([0, 0, 1, 1, 1], [1, 1, 1, 1, 0])
        assert [(s.start_frame, s.end_frame) for s in spans] == [(0, 1), (2, 3), (4, 4)]
        assert spans[2].env is Environment.INDOORS

    def test_overlap_rejected(self):
        a = LabelSpan(0, 5, MotionState.WALKING, Environment.OUTDOORS)
        b = LabelSpan(5, 8, MotionState.WALKING, Environment.OUTDOORS)
        with pytest.raises(ValueError):
            check_spans([a, b])

    def test_forbidden_label(self):
        with pytest.raises(ValueError):
            LabelSpan(0, 1, MotionState.UP_DOWN_STAIRS, Environment.VEHICLE)


class TestBuildingMap:
    def test_interior_point(self):
        bmap = BuildingMap(20, 20, (Building(0, 0, 10, 10),))
        assert map_class(GridLocation(5, 5), bmap) is MapClass.INSIDE_BUILDING

    def test_far_point(self):
        bmap = BuildingMap(100, 100, (Building(0, 0, 10, 10),))
        assert map_class(GridLocation(50, 50), bmap) is MapClass.OUTSIDE_BUILDING

    def test_no_center_on_integer_edge(self):
        # cell centers sit on half metres, so integer boxes never pass through one
        centers = [(x + 0.5, y + 0.5) for x in range(20) for y in range(20)]
        assert not any(float(cx).is_integer() or float(cy).is_integer() for cx, cy in centers)

    def test_building_outside_world(self):
        with pytest.raises(ValueError):
            BuildingMap(10, 10, (Building(5, 5, 11, 8),))

    def test_out_of_bounds_query(self):
        with pytest.raises(ValueError):
            map_class(GridLocation(10, 0), BuildingMap(10, 10))

    def test_round_trip(self, tmp_path):
        bmap = BuildingMap(30, 40, (Building(1, 2, 5, 9), Building(10, 10, 20, 30)))
        bmap.save(tmp_path / "map.json")
        back = BuildingMap.load(tmp_path / "map.json")
        assert back == bmap
        assert np.array_equal(back.inside_mask, bmap.inside_mask)

    def test_malformed(self, tmp_path):
        (tmp_path / "m.json").write_text("{\"world\": }")
        with pytest.raises(ParseError, match="line 1"):
            BuildingMap.load(tmp_path / "m.json")


class TestParams:
    @pytest.fixture
    def params(self):
        return random_params(np.random.default_rng(0), 3, 2, (0.0, 1.0), 4)

    def test_round_trip(self, params):
        assert parse_params(serialize_params(params)).equals(params)

    def test_negative_probability(self, params):
        data = params.to_dict()
        data["env_trans"][0][0] = -0.1
        with pytest.raises(ParamsError, match="negative"):
            ModelParams.from_dict(data)

    def test_row_sum_names_table_and_row(self, params):
        data = params.to_dict()
        row = np.array(data["obs_env"][1][2])
        row[0] -= 0.02
        data["obs_env"][1][2] = row.tolist()
        with pytest.raises(ParamsError, match=r"obs_env row \[1, 2\] sums to 0\.98"):
            ModelParams.from_dict(data)

    def test_structural_zero(self, params):
        data = params.to_dict()
        st_ = np.array(data["state_trans"])
        st_[0, Environment.INDOORS, MotionState.DRIVING_VEHICLE] = 0.5
        st_[0, Environment.INDOORS] /= st_[0, Environment.INDOORS].sum()
        data["state_trans"] = st_.tolist()
        with pytest.raises(ParamsError, match="structural zero"):
            ModelParams.from_dict(data)

    def test_wrong_format(self, params):
        data = params.to_dict()
        data["format"] = "other"
        with pytest.raises(ParseError):
            ModelParams.from_dict(data)

    def test_bad_json(self):
        with pytest.raises(ParseError):
            parse_params(b"{not json")

    def test_arrays_read_only(self, params):
        with pytest.raises(ValueError):
            params.env_trans[0, 0] = 1.0

    def test_save_load(self, params, tmp_path):
        params.save(tmp_path / "p.json")
        assert ModelParams.load(tmp_path / "p.json").equals(params)
        assert json.loads((tmp_path / "p.json").read_text())["format"].startswith("activitydbn-params")

    def test_masks_match_admissible(self):
        masks = structural_masks(ADMISSIBLE)
        for e in Environment:
            assert np.array_equal(masks["state_trans"][0, e], ADMISSIBLE[:, e])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_random_params_round_trip(self, seed):
        p = random_params(np.random.default_rng(seed), 2, 2, (0.0, 0.5, 2.0), 2, sparsity=0.3)
        assert parse_params(serialize_params(p)).equals(p)
