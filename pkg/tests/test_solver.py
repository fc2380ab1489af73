import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadpose.errors import InvalidProblem
from roadpose.geometry import PlanePatch, Rotation, angle_between
from roadpose.pipeline import PipelineConfig, build_problem, estimate_local_plane, initialize_vehicle, schedule_for
from roadpose.residuals import EnergyWeights, cost_by_term, shape_coefficient_residual, vehicle_blocks
from roadpose.shape_model import dimensions, synthetic_prior
from roadpose.solver import (Phase, Problem, SolverConfig, default_schedule, quadratic_residual, solve,
                             unit_normal_parameterization)
from roadpose.synthbench import NoiseSpec, RoadProfile, SceneSpec, VehicleSpec, generate

PRIOR = synthetic_prior()
UP = np.array([0.0, -1.0, 0.0])


def truth_scene(depth=20.0, yaw=0.0, profile=RoadProfile("flat"), noise=NoiseSpec(), seed=0):
    return generate(SceneSpec(profile, (VehicleSpec(depth, 0.0, yaw),), noise, seed=seed))


def single_problem(state, scene, cfg=PipelineConfig()):
    det = scene.frame.detections[0]
    return build_problem([state], [det.observation(scene.frame.rig.intr)], PRIOR, cfg)[0]


def test_quadratic_sanity():
    pb = Problem()
    pb.add_block("x", [0.0], role="translation")
    pb.add_term(quadratic_residual(lambda x: (x - 3.0, np.eye(1)), "x"))
    rep = solve(pb, SolverConfig(schedule=[Phase.of("p", "translation")]))
    assert pb.blocks["x"].value[0] == pytest.approx(3.0, abs=1e-9)
    assert rep.phases[0].iterations <= 5


def test_truth_is_a_fixed_point():
    scene = truth_scene()
    st_ = scene.truth.states["v0"]
    pb = single_problem(st_, scene)
    costs = cost_by_term(pb.evaluate(), pb.weights)
    # the disambiguation barrier is positive everywhere; all other terms vanish
    # both rows equal 1/(1 - eps) = 1.001, on the linear branch of the unit Huber
    assert costs["disambiguation"] == pytest.approx(0.05 * 2 * (1 / 0.999 - 0.5), rel=1e-12)
    assert sum(c for k, c in costs.items() if k != "disambiguation") < 1e-12
    rep = solve(pb, SolverConfig())
    assert rep.final_cost == pytest.approx(rep.initial_cost, abs=1e-12)
    np.testing.assert_allclose(rep.values[(0, "translation")], st_.translation, atol=1e-9)


def test_recovers_yaw_and_depth_perturbation():
    scene = truth_scene(depth=20.0, yaw=15.0)
    truth = scene.truth.states["v0"]
    start = truth.replace(rotation=Rotation.from_axis_angle(UP, np.radians(10)) @ truth.rotation,
                          translation=truth.translation + [0.0, 0.0, 1.0])
    pb = single_problem(start, scene)
    rep = solve(pb, SolverConfig())
    t = rep.values[(0, "translation")]
    R = rep.values[(0, "rotation")]
    assert np.linalg.norm(t - truth.translation) < 1e-2
    assert np.degrees((R @ truth.rotation.inverse()).angle()) < 0.1


def test_default_schedule_shape():
    s = default_schedule()
    assert len(s) == 4
    assert [p.name for p in s] == ["pose", "shape", "pose", "joint"]
    assert all("plane_normal" not in p.roles and "plane_offset" not in p.roles for p in s[:3])
    assert {"plane_normal", "plane_offset"} <= s[3].roles


def test_coplanar_schedule_freezes_planes():
    s = schedule_for(PipelineConfig(coplanar_baseline=True))
    assert len(s) == 4
    assert all(not ({"plane_normal", "plane_offset"} & p.roles) for p in s)


def test_unit_normal_parameterization_identity():
    n = np.array([0.1, -0.9, 0.3])
    n = n / np.linalg.norm(n)
    np.testing.assert_array_equal(unit_normal_parameterization(n, np.zeros(2)), n)


def test_unit_normal_parameterization_stays_unit():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        m = unit_normal_parameterization(n, rng.normal(0, 0.5, 2))
        assert abs(np.linalg.norm(m) - 1.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-0.05, 0.05), b=st.floats(-0.05, 0.05))
def test_unit_normal_step_angle_matches_step_length(a, b):
    n = np.array([0.0, -1.0, 0.0])
    d = np.array([a, b])
    m = unit_normal_parameterization(n, d)
    assert abs(angle_between(n, m) - np.linalg.norm(d)) <= np.linalg.norm(d) ** 3 + 1e-12


def _noisy_slope_problem(cfg=PipelineConfig(), seed=1):
    scene = truth_scene(30.0, 10.0, RoadProfile("pitched", 15.0), NoiseSpec(keypoint_sigma=2.0), seed=seed)
    plane, _ = estimate_local_plane(scene.frame, 0, cfg)
    det = scene.frame.detections[0]
    st_ = initialize_vehicle(det, plane, PRIOR, scene.frame.rig.intr)
    return scene, (lambda: build_problem([st_], [det.observation(scene.frame.rig.intr)], PRIOR, cfg)[0])


def test_accepted_costs_are_monotone_and_phases_chain():
    _, make = _noisy_slope_problem()
    rep = solve(make(), SolverConfig())
    for ph in rep.phases:
        assert all(b < a for a, b in zip(ph.accepted_costs, ph.accepted_costs[1:]))
        assert ph.final_cost <= ph.initial_cost
    for a, b in zip(rep.phases, rep.phases[1:]):
        assert b.initial_cost == pytest.approx(a.final_cost, rel=1e-12)


def test_term_order_does_not_change_the_solution():
    _, make = _noisy_slope_problem()
    a, b = make(), make()
    b.terms.reverse()
    ra, rb = solve(a), solve(b)
    assert rb.final_cost == pytest.approx(ra.final_cost, rel=1e-9)
    np.testing.assert_allclose(rb.values[(0, "translation")], ra.values[(0, "translation")], atol=1e-8)


def test_jacobi_scaling_reaches_the_same_fixed_point():
    _, make = _noisy_slope_problem()
    ra = solve(make(), SolverConfig(jacobi=True, max_iterations=500))
    rb = solve(make(), SolverConfig(jacobi=False, max_iterations=500))
    assert rb.final_cost == pytest.approx(ra.final_cost, rel=1e-6)
    np.testing.assert_allclose(rb.values[(0, "translation")], ra.values[(0, "translation")], atol=1e-4)


def test_joint_phase_lowers_cost_on_a_slope():
    _, make = _noisy_slope_problem()
    sched = default_schedule()
    short = solve(make(), SolverConfig(schedule=sched[:3]))
    full = solve(make(), SolverConfig(schedule=sched))
    assert full.final_cost < short.final_cost


def test_zero_plane_weights_reduce_to_the_plain_objective():
    w = EnergyWeights(eta_g=0.0, eta_n=0.0, eta_d=0.0, eta_b=0.0, eta_c=0.0, eta_p=0.0)
    cfg = PipelineConfig(weights=w, coplanar_baseline=True)
    target = dimensions(PRIOR.mean)
    for seed in range(20):
        scene = truth_scene(12.0 + 1.5 * seed, 3.0 * seed, noise=NoiseSpec(keypoint_sigma=1.5), seed=seed)
        det = scene.frame.detections[0]
        intr = scene.frame.rig.intr
        obs = det.observation(intr)
        st0 = initialize_vehicle(det, PlanePatch(UP, -1.65), PRIOR, intr)
        full = build_problem([st0], [obs], PRIOR, cfg)[0]
        ra = solve(full, cfg.solver.replace(schedule=schedule_for(cfg)))

        plain = Problem(w)
        plain.add_block((0, "rotation"), st0.rotation, kind="rotation", role="rotation")
        plain.add_block((0, "translation"), st0.translation, role="translation")
        plain.add_block((0, "shape"), st0.shape, role="shape", bound=3.0)

        def fn(v, plane=st0.plane, obs=obs):
            st_ = st0.replace(rotation=v[(0, "rotation")], translation=v[(0, "translation")], shape=v[(0, "shape")])
            blocks = vehicle_blocks(PRIOR, st_, obs, w, target, cfg.sigma_dims, plane_terms=False)
            return blocks + [shape_coefficient_residual(st_, PRIOR, cfg.sigma_shape)]

        plain.add_term(fn)
        rb = solve(plain, cfg.solver.replace(schedule=schedule_for(cfg)))
        np.testing.assert_allclose(ra.values[(0, "translation")], rb.values[(0, "translation")], atol=1e-6)


def test_invalid_problems():
    with pytest.raises(InvalidProblem):
        solve(Problem())
    pb = Problem()
    pb.add_block("x", [0.0], role="translation")
    pb.add_term(quadratic_residual(lambda x: (x, np.eye(1)), "y"))
    with pytest.raises((InvalidProblem, KeyError)):
        solve(pb)
    pb = Problem()
    pb.add_block("x", [1.0], role="translation")
    pb.add_term(quadratic_residual(lambda x: (x, np.eye(1)), "x"))
    with pytest.raises(InvalidProblem, match="no free"):
        solve(pb, SolverConfig(schedule=[Phase.of("s", "shape")]))
    with pytest.raises(InvalidProblem):
        pb.add_block("x", [2.0])
    with pytest.raises(ValueError):
        Phase.of("bad", "colour")
