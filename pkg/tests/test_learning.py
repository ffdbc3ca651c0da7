
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activitydbn.factors import MSB_ONLY
from activitydbn.inference import EXACT, forward_backward
from activitydbn.learning import (
    EmConfig,
    ScheduleKind,
    TraceCollapse,
    VeSchedule,
    drop_labels,
    e_step,
    em_train,
    expand_annotations,
    initialize_params,
    load_annotations,
    m_step,
    random_single_frame,
    save_annotations,
    supervised_counts,
)
from activitydbn.model import (
    ADMISSIBLE,
    N_ENVS,
    N_STATES,
    Environment,
    LabelSpan,
    MotionState,
    ParseError,
    structural_masks,
)
from oracles import A, B, ONE_CELL, OUT, hand_baum_welch, random_frames, two_state_toy

def labeled_collapsed(seed, n_traces=3, n_frames=30):
    rng = np.random.default_rng(seed)
    pairs = np.argwhere(ADMISSIBLE)
    out = []
    for _ in range(n_traces):
        frames = random_frames(rng, n_frames)
        lab = pairs[rng.integers(len(pairs), size=n_frames)]
        out.append((frames, lab[:, 0], lab[:, 1]))
    return out


def hard_schedule(states, envs, kind=ScheduleKind.HARD_LABELS):
    from activitydbn.model import spans_from_labels

    return expand_annotations(spans_from_labels(states, envs), len(states), kind)


class TestBaumWelch:
    def test_one_step_matches_hand_update(self):
        p = two_state_toy()
        frames = random_frames(np.random.default_rng(9), 3)
        xi, z = hand_baum_welch(p, frames)
        res = em_train([(frames, None)], p, ONE_CELL, EmConfig(1, dirichlet_smoothing=0.0, beam=EXACT), MSB_ONLY)
        expect = xi / xi.sum(axis=1, keepdims=True)
        got = res.params.state_trans[np.ix_([A, B], [OUT], [A, B])][:, 0, :]
        assert np.abs(got - expect).max() < 1e-9
        assert res.ll_trajectory[0] == pytest.approx(np.log(z), abs=1e-9)

    def test_smoothing_adds_pseudo_counts(self):
        p = two_state_toy()
        frames = random_frames(np.random.default_rng(10), 3)
        xi, _ = hand_baum_welch(p, frames)
        res = em_train([(frames, None)], p, ONE_CELL, EmConfig(1, dirichlet_smoothing=0.1, beam=EXACT), MSB_ONLY)
        expect = (xi + 0.1) / (xi + 0.1).sum(axis=1, keepdims=True)
        got = res.params.state_trans[np.ix_([A, B], [OUT], [A, B])][:, 0, :]
        assert np.abs(got - expect).max() < 1e-9

    def test_excluded_pairs_stay_zero(self):
        p = two_state_toy()
        res = em_train([(random_frames(np.random.default_rng(1), 6), None)], p, ONE_CELL, EmConfig(3, beam=EXACT))
        keep = np.zeros(N_STATES, bool)
        keep[[A, B]] = True
        assert (res.params.state_trans[:, OUT][:, ~keep] == 0).all()
        assert (res.params.init_state[OUT, ~keep] == 0).all()


class TestSupervised:
    def test_one_step_equals_label_counts(self):
        data = labeled_collapsed(0)
        init = initialize_params(3, 1, 1, (0.0,), 1)
        sched = [(f, hard_schedule(s, e)) for f, s, e in data]
        res = em_train(sched, init, ONE_CELL, EmConfig(1, beam=EXACT))
        counts = supervised_counts([(s, e) for _, s, e in data], [f for f, _, _ in data])
        ref = m_step(init, counts, 0.1)
        for name in ("env_trans", "state_trans", "obs_state", "obs_env", "init_env", "init_state"):
            assert np.abs(getattr(ref, name) - getattr(res.params, name)).max() < 1e-12, name

    def test_fixed_point(self):
        data = labeled_collapsed(1)
        init = initialize_params(3, 1, 1, (0.0,), 1)
        sched = [(f, hard_schedule(s, e)) for f, s, e in data]
        once = em_train(sched, init, ONE_CELL, EmConfig(1, beam=EXACT)).params
        twice = em_train(sched, once, ONE_CELL, EmConfig(1, beam=EXACT)).params
        assert twice.equals(once)

    def test_hard_posteriors_are_point_masses(self):
        (frames, s, e), = labeled_collapsed(2, n_traces=1, n_frames=12)
        p = initialize_params(4, 1, 1, (0.0,), 1)
        res = forward_backward(frames, p, ONE_CELL, EXACT, hard_schedule(s, e))
        for k, post in enumerate(res.posteriors):
            d = post.to_dict()
            assert len(d) == 1
            (js, prob), = d.items()
            assert (js.state, js.env) == (s[k], e[k])
            assert prob == pytest.approx(1.0, abs=1e-12)


class TestAllUniform:
    def test_bit_identical_to_no_evidence(self):
        data = labeled_collapsed(3, n_frames=20)
        init = initialize_params(0, 1, 1, (0.0,), 1)
        cfg = EmConfig(5, rel_ll_tolerance=1e-12, beam=EXACT)
        plain = em_train([(f, None) for f, _, _ in data], init, ONE_CELL, cfg)
        uni = em_train(
            [(f, expand_annotations([], len(f), ScheduleKind.ALL_UNIFORM)) for f, _, _ in data], init, ONE_CELL, cfg
        )
        assert plain.ll_trajectory == uni.ll_trajectory
        assert plain.params.equals(uni.params)


class TestMonotone:
    def test_log_likelihood_non_decreasing(self):
        rng = np.random.default_rng(7)
        traces = [(random_frames(rng, 40), None) for _ in range(5)]
        init = initialize_params(1, 1, 1, (0.0,), 1)
        res = em_train(traces, init, ONE_CELL, EmConfig(20, rel_ll_tolerance=1e-300, beam=EXACT))
        ll = np.array(res.ll_trajectory)
        assert len(ll) == 20
        assert (np.diff(ll) >= -1e-8 * np.abs(ll[:-1])).all()

    def test_rows_stay_normalized(self):
        rng = np.random.default_rng(8)
        traces = [(random_frames(rng, 25), None) for _ in range(2)]
        params = initialize_params(2, 1, 1, (0.0,), 1)
        masks = structural_masks(ADMISSIBLE)
        for _ in range(4):
            params = m_step(params, e_step(traces, params, ONE_CELL, EXACT), 0.1)
            for name in ("env_trans", "state_trans", "obs_state", "obs_env", "init_state", "speed_trans", "heading_trans"):
                arr = getattr(params, name)
                assert np.abs(arr.sum(-1)[arr.sum(-1) > 0] - 1).max() < 1e-9, name
            assert (params.state_trans[~masks["state_trans"]] == 0).all()


class TestEmErrors:
    def test_collapse_names_trace(self):
        (frames, s, e), = labeled_collapsed(4, n_traces=1, n_frames=5)
        p = initialize_params(0, 1, 1, (0.0,), 1)
        table = np.zeros((5, N_STATES, N_ENVS))
        table[:, MotionState.DRIVING_VEHICLE, Environment.VEHICLE] = 1.0
        # forbid driving entirely so the evidence and the model disagree
        st_ = np.array(p.state_trans)
        st_[:, Environment.VEHICLE, MotionState.DRIVING_VEHICLE] = 0.0
        st_[:, Environment.VEHICLE] /= st_[:, Environment.VEHICLE].sum(-1, keepdims=True)
        init_state = np.array(p.init_state)
        init_state[Environment.VEHICLE, MotionState.DRIVING_VEHICLE] = 0.0
        init_state[Environment.VEHICLE] /= init_state[Environment.VEHICLE].sum()
        bad = p.replace(state_trans=st_, init_state=init_state)
        good = (frames, None)
        with pytest.raises((TraceCollapse, ValueError)) as info:
            em_train([good, (frames, VeSchedule(table))], bad, ONE_CELL, EmConfig(1, beam=EXACT))
        if isinstance(info.value, TraceCollapse):
            assert info.value.trace == 1

    def test_empty_traces(self):
        with pytest.raises(ValueError):
            em_train([], initialize_params(0, 1, 1, (0.0,), 1), ONE_CELL)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EmConfig(max_iters=0)
        with pytest.raises(ValueError):
            EmConfig(dirichlet_smoothing=-1)


def span(a, b, s=MotionState.WALKING, e=Environment.OUTDOORS):
    return LabelSpan(a, b, s, e)


class TestDropLabels:
    def test_zero_percent_identity(self):
        spans = [span(0, 9), span(10, 30, MotionState.RUNNING)]
        assert drop_labels(spans, 0) == spans

    def test_full_drop_keeps_middle(self):
        assert drop_labels([span(0, 40)], 100) == [span(20, 20)]

    def test_half(self):
        assert drop_labels([span(0, 39)], 50) == [span(10, 29)]

    def test_odd_trim_leans_early(self):
        # 10 frames keep 7, three trimmed: one before, two after
        assert drop_labels([span(0, 9)], 30) == [span(1, 7)]

    def test_bad_percent(self):
        with pytest.raises(ValueError):
            drop_labels([span(0, 3)], 101)

    @given(st.integers(1, 200), st.integers(0, 100))
    def test_kept_block_is_central(self, n, pct):
        (kept,) = drop_labels([span(0, n - 1)], pct)
        before = kept.start_frame
        after = n - 1 - kept.end_frame
        assert 0 <= after - before <= 1
        assert kept.length >= 1

    def test_random_single_frame_inside(self):
        spans = [span(0, 9), span(10, 30, MotionState.RUNNING)]
        out = random_single_frame(spans, np.random.default_rng(0))
        for a, b in zip(spans, out):
            assert b.length == 1 and a.start_frame <= b.start_frame <= a.end_frame


class TestSchedules:
    spans = [span(0, 1, MotionState.STATIONARY), span(6, 7, MotionState.RUNNING)]

    def test_linear_midpoint(self):
        t = expand_annotations(self.spans, 8, ScheduleKind.LINEAR_FADE).table
        # gap frames 2..5 between k1 = 1 and k2 = 6; frame 3.5 is the middle
        assert t[2, MotionState.STATIONARY, OUT] == pytest.approx(0.8)
        assert t[2, MotionState.RUNNING, OUT] == pytest.approx(0.2)
        assert t[3, MotionState.STATIONARY, OUT] + t[3, MotionState.RUNNING, OUT] == pytest.approx(1.0)
        odd = expand_annotations([span(0, 0, A), span(4, 4, B)], 5, ScheduleKind.LINEAR_FADE).table
        assert odd[2, A, OUT] == odd[2, B, OUT] == 0.5

    def test_two_way(self):
        t = expand_annotations(self.spans, 8, ScheduleKind.TWO_WAY_UNIFORM).table
        for k in range(2, 6):
            assert t[k].sum() == 2.0
            assert t[k, MotionState.STATIONARY, OUT] == t[k, MotionState.RUNNING, OUT] == 1.0

    def test_all_uniform(self):
        t = expand_annotations(self.spans, 8, ScheduleKind.ALL_UNIFORM).table
        assert np.array_equal(t[3], ADMISSIBLE.astype(float))
        assert t[0].sum() == 1.0

    def test_hard_rejects_gap(self):
        with pytest.raises(ValueError, match="2..5"):
            expand_annotations(self.spans, 8, ScheduleKind.HARD_LABELS)

    def test_trailing_gap_uses_last_label(self):
        t = expand_annotations(self.spans, 10, ScheduleKind.LINEAR_FADE).table
        assert t[9, MotionState.RUNNING, OUT] == 1.0 and t[9].sum() == 1.0

    def test_span_past_end(self):
        with pytest.raises(ValueError):
            expand_annotations(self.spans, 7, ScheduleKind.TWO_WAY_UNIFORM)

    def test_dead_frame_rejected(self):
        with pytest.raises(ValueError):
            VeSchedule(np.zeros((2, N_STATES, N_ENVS)))

    def test_annotation_round_trip(self, tmp_path):
        save_annotations(self.spans, tmp_path / "a.json")
        assert load_annotations(tmp_path / "a.json") == self.spans

    def test_annotation_parse_error(self, tmp_path):
        (tmp_path / "a.json").write_text("[\n{]")
        with pytest.raises(ParseError, match="line 2"):
            load_annotations(tmp_path / "a.json")


class TestInitialize:
    def test_zero_jitter_uniform(self):
        p = initialize_params(0, 2, 2, (0.0, 1.0), 4, jitter=0.0)
        masks = structural_masks(ADMISSIBLE)
        for e in Environment:
            row = p.state_trans[0, e]
            assert np.allclose(row[masks["state_trans"][0, e]], 1 / masks["state_trans"][0, e].sum())
        assert np.all(p.heading_trans == 0.25)

    def test_deterministic(self):
        assert initialize_params(7, 3, 2).equals(initialize_params(7, 3, 2))
        assert not initialize_params(7, 3, 2).equals(initialize_params(8, 3, 2))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_rows_and_zeros(self, seed):
        p = initialize_params(seed, 2, 3, (0.0, 1.0, 2.0), 4)
        masks = structural_masks(ADMISSIBLE)
        for name in ("env_trans", "state_trans", "heading_trans", "speed_trans", "obs_state", "obs_env",
                     "init_env", "init_state", "init_speed", "init_heading"):
            arr = getattr(p, name)
            sums = arr.sum(-1)
            assert np.abs(sums[sums > 0] - 1).max() < 1e-12, name
        assert (p.state_trans[~masks["state_trans"]] == 0).all()
        assert (p.init_state[~masks["init_state"]] == 0).all()
