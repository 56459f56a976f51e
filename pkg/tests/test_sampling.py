import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaprom.mor import FrequencyGrid
from adaprom.sampling import (AdaptiveConfig, SampleSet, TIMING_KEYS, enforce_min_distance,
                              full_factorial, prom_error_map, relative_improvements,
                              run_adaptive, run_fd_optimization, run_ffd_baseline,
                              stopping_check)
from adaprom.adjoint import ObjectiveSpec

LO, HI = (0.01, 0.01), (0.05, 0.05)


def test_two_level_design_is_the_four_corners():
    pts = full_factorial(LO, HI, 2)
    assert pts.tolist() == [[0.01, 0.01], [0.01, 0.05], [0.05, 0.01], [0.05, 0.05]]


def test_three_level_design_contains_the_center():
    pts = full_factorial(LO, HI, 3)
    assert len(pts) == 9
    assert any(np.allclose(p, [0.03, 0.03]) for p in pts)


def test_single_level_design_is_the_center_and_levels_are_validated():
    assert np.allclose(full_factorial(LO, HI, 1), [[0.03, 0.03]])
    assert full_factorial(LO, HI, [2, 3]).shape == (6, 2)
    with pytest.raises(ValueError):
        full_factorial(LO, HI, 0)


def _gap(p, pts, units="normalized"):
    scale = np.subtract(HI, LO) if units == "normalized" else 1.0
    return np.min(np.linalg.norm((np.asarray(pts) - p) / scale, axis=1))


def test_far_point_is_unchanged():
    p, warn = enforce_min_distance([0.03, 0.03], [[0.01, 0.01]], 0.1, LO, HI)
    assert p.tolist() == [0.03, 0.03] and not warn


def test_coincident_point_is_moved_to_the_threshold():
    pts = [[0.03, 0.03], [0.02, 0.04]]
    p, warn = enforce_min_distance([0.03, 0.03], pts, 0.05, LO, HI)
    assert not warn
    assert _gap(p, pts) >= 0.05 * (1 - 1e-9)


def test_occupied_corner_moves_along_the_boundary():
    pts = full_factorial(LO, HI, 2)
    p, warn = enforce_min_distance([0.05, 0.05], pts, 12.5e-4, LO, HI, units="raw")
    assert not warn
    assert np.all(p >= LO) and np.all(p <= HI)
    assert _gap(p, pts, "raw") >= 12.5e-4 * (1 - 1e-9)
    assert np.sum(np.isclose(p, HI)) == 1  # still on one face of the box


def test_overcrowded_box_returns_best_effort_with_warning():
    pts = full_factorial(LO, HI, 5)
    p, warn = enforce_min_distance([0.03, 0.03], pts, 0.6, LO, HI)
    assert warn
    assert np.all(p >= LO) and np.all(p <= HI)


def test_distance_guard_validation():
    with pytest.raises(ValueError):
        enforce_min_distance([0.03, 0.03], [], 0.0, LO, HI)
    with pytest.raises(ValueError):
        enforce_min_distance([0.03, 0.03], [], 0.1, LO, HI, units="meters")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=12),
       st.tuples(st.floats(0, 1), st.floats(0, 1)), st.floats(0.01, 0.1))
def test_guard_meets_threshold_whenever_it_does_not_warn(existing, new, thr):
    lo, hi = np.array(LO), np.array(HI)
    pts = lo + np.array(existing) * (hi - lo)
    p, warn = enforce_min_distance(lo + np.array(new) * (hi - lo), pts, thr, LO, HI)
    assert np.all(p >= lo) and np.all(p <= hi)
    if not warn:
        assert _gap(p, pts) >= thr * (1 - 1e-9)


def test_stop_rule_on_tabulated_final_iterations():
    rel = relative_improvements([-9.5991, -9.5990])
    assert rel[0] == pytest.approx(1.0418e-5, rel=1e-3)
    assert stopping_check([-9.5, -9.5991, -9.5990], 1e-3, 50, pairs=1).stop
    assert stopping_check([-9.5991, -9.5990], 1e-3, 50, pairs=1).stop
    # the default two-pair rule needs one more small step
    assert not stopping_check([-9.5991, -9.5990], 1e-3, 50).stop
    assert stopping_check([-9.5992, -9.5991, -9.5990], 1e-3, 50).stop


def test_stop_rule_continues_while_improving_and_honours_the_cap():
    steps = list(10.0 * 0.9 ** np.arange(6))
    assert not stopping_check(steps, 1e-3, 50).stop
    assert not stopping_check([1.0], 1e-3, 50).stop
    d = stopping_check(steps, 1e-3, 6)
    assert d.stop and d.reason == "iteration limit"


def _fake_sample(p):
    basis = SimpleNamespace(r=2, iterations=3, converged=True, V=np.eye(3)[:, :2])
    return SimpleNamespace(p=p, basis=basis, summary=lambda inc=False: {"p": list(p)})


def test_sample_set_rejects_duplicates():
    from adaprom.sampling import ReducedSample
    s = SampleSet([ReducedSample(p=[0.01, 0.02], basis=_fake_sample(0).basis)])
    with pytest.raises(ValueError):
        s.append(ReducedSample(p=np.array([0.01, 0.02]), basis=_fake_sample(0).basis))
    s.append(ReducedSample(p=[0.02, 0.02], basis=_fake_sample(0).basis))
    assert s.points.shape == (2, 2)
    data = json.loads(s.to_json())
    assert data["samples"][0] == {"p": [0.01, 0.02], "local_order": 2, "irka_iterations": 3,
                                  "irka_converged": True}
    assert "basis" in json.loads(s.to_json(include_bases=True))["samples"][0]


def test_adaptive_config_validation():
    spec = ObjectiveSpec(50, 100)
    with pytest.raises(ValueError):
        AdaptiveConfig(spec, min_distance=0.0)
    with pytest.raises(ValueError):
        AdaptiveConfig(spec, kappa=1.5)
    with pytest.raises(ValueError):
        AdaptiveConfig(spec, distance_units="mm")


# -- beam runs -----------------------------------------------------------------

def test_each_iteration_adds_exactly_one_sample(beam_run, beam_config):
    recs = beam_run.iterations
    assert [r.iteration for r in recs] == list(range(1, len(recs) + 1))
    assert [r.n_samples for r in recs] == [4 + i for i in range(1, len(recs) + 1)]
    assert len(beam_run.samples) == 4 + len(recs)
    thr = beam_config.adaptive.min_distance
    pts = beam_run.samples.points
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2) + np.eye(len(pts))
    assert d.min() >= thr * (1 - 1e-9) or any(r.distance_warning for r in recs)


def test_reported_optimum_is_the_best_verified_point(beam_run):
    fom = [r.fom_objective for r in beam_run.iterations]
    best = beam_run.iterations[int(np.argmin(fom))]
    assert beam_run.objective == min(fom)
    assert np.array_equal(beam_run.p_opt, best.p_found)


def test_global_order_never_decreases(beam_run):
    orders = [r.global_order for r in beam_run.iterations]
    assert all(a <= b for a, b in zip(orders, orders[1:]))


def test_surrogate_model_count(beam_run):
    sur = beam_run.surrogate
    assert sur.mean.shape[:2] == (3, sur.r * (sur.r + 1) // 2)
    assert sur.r == beam_run.iterations[-1].global_order


def test_run_records_timings_for_every_subroutine(beam_run):
    assert set(beam_run.timings) == set(TIMING_KEYS)
    assert all(v >= 0 for v in beam_run.timings.values())
    assert "timings" not in beam_run.to_dict()


def test_replay_is_identical_for_any_thread_count(beam_run, beam_config):
    model = beam_config.build_model()
    again = run_adaptive(model, beam_config.adaptive_config(workers=1))
    assert json.dumps(again.to_dict()) == json.dumps(beam_run.to_dict())
    threaded = run_adaptive(model, beam_config.adaptive_config(workers=4))
    assert json.dumps(threaded.to_dict()) == json.dumps(beam_run.to_dict())


def test_other_seed_still_reaches_the_thickness_bound(beam_config):
    res = run_adaptive(beam_config.build_model(), beam_config.adaptive_config(seed=5))
    assert res.p_opt[0] == pytest.approx(0.05, abs=1e-6)
    assert abs(res.p_opt[1] - 0.02437) < 1e-3


def test_error_map_at_samples_tracks_the_reprojected_model(beam_run, beam_config):
    from adaprom.mor import transfer_function
    model = beam_config.build_model()
    grid = FrequencyGrid.band(50, 100)
    trained = beam_run.samples.samples[:-1]  # the last sample came after the final fit
    err = prom_error_map(beam_run.surrogate, model, [s.p for s in trained], grid,
                         [s.system for s in trained])
    assert np.all(err >= 0) and np.all(np.isfinite(err))
    for s, e in zip(trained, err):
        y = transfer_function(s.system, grid.s)
        ref = np.mean(np.abs(transfer_function(s.rom, grid.s) - y) / np.abs(y))
        assert abs(e - ref) < 0.02  # regression residual only
    mid = prom_error_map(beam_run.surrogate, model, [[0.03, 0.03]], grid)
    assert mid[0] >= 0


def test_two_level_ffd_baseline(beam_config):
    res = run_ffd_baseline(beam_config.build_model(), beam_config.adaptive_config(), 2)
    assert len(res.samples) == 4
    assert res.iterations[0].degree == 1
    assert res.surrogate.basis.n_f == 3


def test_fom_finite_difference_run_agrees_with_adaptive_optimum(beam_run, beam_fd_run):
    res = beam_fd_run
    assert np.all(np.abs(res.p_opt - beam_run.p_opt) < 1e-3)
    assert res.n_objective >= 5 * res.n_gradient


def test_fd_level_is_validated(beam_config):
    with pytest.raises(ValueError):
        run_fd_optimization(beam_config.build_model(), beam_config.adaptive_config(), "XOM")
