import numpy as np
import pytest

from roadpose.errors import IdMismatch, PlaneUnavailable, RayParallelToPlane
from roadpose.geometry import PlanePatch, Rotation, angle_between, signed_distance
from roadpose.pipeline import (ATE, Detection, FrameInput, LocalizationResult, PipelineConfig, VehicleResult, ate,
                               estimate_local_plane, initialize_vehicle, localize_frame)
from roadpose.shape_model import base_translation, instantiate, synthetic_prior
from roadpose.synthbench import NoiseSpec, RoadProfile, SceneSpec, VehicleSpec, generate

PRIOR = synthetic_prior()
UP = np.array([0.0, -1.0, 0.0])


def scene(profile=RoadProfile(), vehicles=(VehicleSpec(20.0),), noise=NoiseSpec(), seed=0):
    return generate(SceneSpec(profile, tuple(vehicles), noise, seed=seed), PRIOR)


def with_detections(frame, dets, corr=None):
    return FrameInput(frame.frame_id, tuple(dets), frame.rig, frame.correspondences if corr is None else corr)


def fake_result(translations):
    vs = []
    for k, t in translations.items():
        st = scene().truth.states["v0"].replace(translation=np.asarray(t, float))
        vs.append(VehicleResult(k, st, instantiate(PRIOR, st), st.plane, "test", {}))
    return LocalizationResult("f", vs, [])


# --- local planes ------------------------------------------------------------

def test_flat_road_plane_from_multiview_chain():
    s = scene()
    plane, source = estimate_local_plane(s.frame, 0)
    assert source == "multiview"
    assert np.degrees(angle_between(plane.normal, UP)) < 0.5
    assert plane.offset == pytest.approx(-1.65, abs=0.02)


def test_pitched_patch_normal_recovered_within_a_degree():
    s = scene(RoadProfile("pitched", 15.0, 10.0))
    plane, source = estimate_local_plane(s.frame, 0)
    assert source == "multiview"
    assert np.degrees(angle_between(plane.normal, s.truth.planes["v0"].normal)) < 1.0


def test_coplanar_fallback_without_correspondences_is_exact():
    s = scene()
    frame = with_detections(s.frame, s.frame.detections, corr=())
    plane, source = estimate_local_plane(frame, 0)
    assert source == "coplanar"
    np.testing.assert_array_equal(plane.normal, UP)
    assert plane.offset == -1.65


def test_external_plane_prior_takes_priority():
    s = scene()
    ext = PlanePatch(np.array([0.0, -np.cos(0.1), -np.sin(0.1)]), -1.7)
    d = s.frame.detections[0]
    frame = with_detections(s.frame, [Detection(d.bbox, d.keypoints2d, d.confidences, d.id, ext)])
    plane, source = estimate_local_plane(frame, 0)
    assert source == "external"
    assert plane == ext


def test_require_multiview_raises_and_reports_unlocalized():
    s = scene()
    frame = with_detections(s.frame, s.frame.detections, corr=())
    cfg = PipelineConfig(fallback_plane_mode="require_multiview")
    with pytest.raises(PlaneUnavailable):
        estimate_local_plane(frame, 0, cfg)
    res = localize_frame(frame, PRIOR, cfg)
    assert res.vehicles == []
    assert res.unlocalized[0][0] == "v0" and "PlaneUnavailable" in res.unlocalized[0][1]


def test_one_failing_detection_does_not_block_the_others():
    s = scene(vehicles=(VehicleSpec(15.0, -2.5), VehicleSpec(20.0, 2.5)))
    d0, d1 = s.frame.detections
    u0, _, u1, v1 = d0.bbox
    ray = s.frame.rig.intr.ray((0.5 * (u0 + u1), v1))
    n = np.cross(ray, [1.0, 0.0, 0.0])  # a plane the bbox ray runs along
    n = -n / np.linalg.norm(n) * np.sign(n[1])
    bad = Detection(d0.bbox, d0.keypoints2d, d0.confidences, d0.id, PlanePatch(n, -1.0))
    frame = with_detections(s.frame, [bad, d1])
    res = localize_frame(frame, PRIOR)
    assert [v.id for v in res.vehicles] == ["v1"]
    assert res.unlocalized[0][0] == "v0"


# --- initialization ----------------------------------------------------------

def test_initial_depth_within_five_percent_at_twenty_metres():
    s = scene()
    st = initialize_vehicle(s.frame.detections[0], PlanePatch(UP, -1.65), PRIOR, s.frame.rig.intr)
    assert abs(st.translation[2] - 20.0) < 0.05 * 20.0
    np.testing.assert_array_equal(st.shape, np.zeros(PRIOR.B))


def test_initial_base_point_lies_on_an_uphill_patch():
    s = scene(RoadProfile("pitched", 20.0, 10.0))
    road = s.truth.planes["v0"]
    st = initialize_vehicle(s.frame.detections[0], road, PRIOR, s.frame.rig.intr)
    assert signed_distance(st.plane, base_translation(st, PRIOR, instantiate(PRIOR, st))) == pytest.approx(0, abs=1e-12)
    np.testing.assert_allclose(st.plane.normal, road.normal, atol=1e-15)
    np.testing.assert_allclose(st.rotation.apply(UP), road.normal, atol=1e-12)


def test_ray_parallel_to_plane():
    s = scene()
    d = s.frame.detections[0]
    intr = s.frame.rig.intr
    # bbox bottom on the horizon row of a flat road
    bbox = (intr.cx - 20.0, intr.cy - 30.0, intr.cx + 20.0, intr.cy)
    with pytest.raises(RayParallelToPlane):
        initialize_vehicle(Detection(bbox, d.keypoints2d, d.confidences), PlanePatch(UP, -1.65), PRIOR, intr)


# --- localization ------------------------------------------------------------

def test_single_flat_car_noiseless():
    s = scene()
    res = localize_frame(s.frame, PRIOR)
    v = res.by_id()["v0"]
    assert np.linalg.norm(v.state.translation - s.truth.states["v0"].translation) < 1e-2
    assert v.plane_source == "multiview"
    assert v.depth == pytest.approx(np.linalg.norm(v.state.translation))
    assert v.depth_z == v.state.translation[2]


def test_steep_slope_joint_beats_coplanar_baseline():
    s = scene(RoadProfile("pitched", 25.0, 6.0), (VehicleSpec(30.0),))
    truth = s.truth.translations()
    joint = localize_frame(s.frame, PRIOR)
    base = localize_frame(s.frame, PRIOR, PipelineConfig(coplanar_baseline=True))
    ej = np.linalg.norm(joint.vehicles[0].state.translation - truth["v0"])
    eb = np.linalg.norm(base.vehicles[0].state.translation - truth["v0"])
    assert abs(joint.vehicles[0].depth_z - truth["v0"][2]) < 1.0
    assert eb >= 3 * ej


def _paired_frame(seed, tilt_deg=0.0):
    s = scene(RoadProfile("pitched", 10.0, 6.0), (VehicleSpec(20.0, -2.0), VehicleSpec(20.0, 2.0)),
              NoiseSpec(keypoint_sigma=2.0), seed)
    d0, d1 = s.frame.detections
    rng = np.random.default_rng(seed)
    conf, kp = d1.confidences.copy(), d1.keypoints2d.copy()
    shown = np.flatnonzero(conf > 0)
    drop = rng.choice(shown, len(shown) // 2, replace=False)
    conf[drop], kp[drop] = 0.0, 0.0
    ext = None
    if tilt_deg:
        tp = s.truth.planes["v1"]
        n = Rotation.from_axis_angle([0.0, 0.0, 1.0], np.radians(tilt_deg)).apply(tp.normal)
        ext = PlanePatch(n, float(n @ (tp.offset * tp.normal)))
    return s, with_detections(s.frame, [d0, Detection(d1.bbox, kp, conf, d1.id, ext)])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_weak_car_plane_agrees_with_strong_neighbour(seed):
    _, frame = _paired_frame(seed)
    r = localize_frame(frame, PRIOR).by_id()
    assert np.degrees(angle_between(r["v0"].plane.normal, r["v1"].plane.normal)) < 1.0


def test_consistency_pulls_a_mismeasured_plane_towards_its_neighbour():
    _, frame = _paired_frame(0, tilt_deg=3.0)
    paired = localize_frame(frame, PRIOR).by_id()
    alone = localize_frame(frame, PRIOR, PipelineConfig(neighbor_radius=1.0)).by_id()
    gap = lambda r: angle_between(r["v0"].plane.normal, r["v1"].plane.normal)
    assert paired["v0"].costs["consistency"] > 0 and alone["v0"].costs["consistency"] == 0
    assert gap(paired) < gap(alone)


def test_detection_order_invariance():
    s = scene(vehicles=(VehicleSpec(15.0, -2.0, 5.0), VehicleSpec(18.0, 2.0, -10.0)), noise=NoiseSpec(keypoint_sigma=1.0))
    a = localize_frame(s.frame, PRIOR)
    b = localize_frame(with_detections(s.frame, reversed(s.frame.detections)), PRIOR)
    assert b.report.final_cost == pytest.approx(a.report.final_cost, rel=1e-8, abs=1e-8)
    for k, va in a.by_id().items():
        vb = b.by_id()[k]
        np.testing.assert_allclose(vb.state.translation, va.state.translation, atol=1e-6)
        np.testing.assert_allclose(vb.state.rotation.as_matrix(), va.state.rotation.as_matrix(), atol=1e-6)
        np.testing.assert_allclose(vb.state.shape, va.state.shape, atol=1e-6)
        for term, c in va.costs.items():
            assert vb.costs[term] == pytest.approx(c, rel=1e-6, abs=1e-8)


def test_wireframe_equals_instantiated_state():
    s = scene(noise=NoiseSpec(keypoint_sigma=1.0))
    for v in localize_frame(s.frame, PRIOR).vehicles:
        np.testing.assert_array_equal(v.wireframe, instantiate(PRIOR, v.state))
        assert v.plane.offset == pytest.approx(v.state.plane.offset - PRIOR.base_height)


def test_empty_frame_rejected():
    s = scene()
    with pytest.raises(ValueError):
        localize_frame(with_detections(s.frame, []), PRIOR)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(neighbor_radius=0.0)
    with pytest.raises(ValueError):
        PipelineConfig(bbox_expansion=0.9)
    with pytest.raises(ValueError):
        PipelineConfig(fallback_plane_mode="guess")


# --- ATE ---------------------------------------------------------------------

def test_ate_zero_at_truth():
    t = {"a": [0.0, 1.0, 10.0], "b": [2.0, 1.0, 20.0]}
    e = ate(fake_result(t), t)
    assert e.mean == 0.0 and e.std == 0.0


def test_ate_single_offset():
    e = ate(fake_result({"a": [0.0, 1.0, 12.0]}), {"a": [0.0, 1.0, 10.0]})
    assert e.per_vehicle == {"a": 2.0}
    assert e.mean == 2.0


def test_ate_batch_matches_direct_recomputation():
    rng = np.random.default_rng(3)
    est = {f"c{i}": rng.uniform([-5, 0, 5], [5, 2, 40]) for i in range(10)}
    gt = {k: v + rng.normal(0, 0.5, 3) for k, v in est.items()}
    e = ate(fake_result(est), gt)
    d = np.array([np.sqrt(sum((est[k][i] - gt[k][i]) ** 2 for i in range(3))) for k in sorted(est)])
    assert isinstance(e, ATE)
    assert e.mean == pytest.approx(d.sum() / 10, rel=1e-12)
    assert e.std == pytest.approx(np.sqrt(((d - d.sum() / 10) ** 2).sum() / 10), rel=1e-12)


def test_ate_id_mismatch():
    with pytest.raises(IdMismatch, match="b"):
        ate(fake_result({"a": [0.0, 1.0, 10.0]}), {"a": [0, 1, 10], "b": [0, 1, 12]})
