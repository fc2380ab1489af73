import json

import numpy as np
import pytest

from roadpose.errors import InvalidSpec
from roadpose.geometry import signed_distance
from roadpose.residuals import reprojection_residual
from roadpose.shape_model import instantiate, synthetic_prior
from roadpose.synthbench import (BUCKETS, NoiseSpec, RoadProfile, SceneRow, SceneSpec, VehicleSpec, default_suite,
                                 dumps_report, flat_suite, format_table, generate, in_bucket, report_dict,
                                 run_benchmark, summarize, truth_residuals, visible_keypoints)

PRIOR = synthetic_prior()


def test_generation_is_deterministic():
    spec = SceneSpec(RoadProfile("pitched", 10.0), (VehicleSpec(20.0, 1.0, 10.0, (0.5, -0.2)),),
                     NoiseSpec(2.0, 0.1, 0.1, 1.0, 0.2), seed=7)
    a, b = generate(spec), generate(spec)
    for da, db in zip(a.frame.detections, b.frame.detections):
        assert da.bbox == db.bbox
        np.testing.assert_array_equal(da.keypoints2d, db.keypoints2d)
        np.testing.assert_array_equal(da.confidences, db.confidences)
    for ca, cb in zip(a.frame.correspondences, b.frame.correspondences):
        np.testing.assert_array_equal(ca.points_a, cb.points_a)
        np.testing.assert_array_equal(ca.points_b, cb.points_b)
    np.testing.assert_array_equal(a.truth.road_points, b.truth.road_points)


def test_noiseless_scene_reprojects_exactly():
    s = generate(SceneSpec(vehicles=(VehicleSpec(20.0),)))
    det = s.frame.detections[0]
    blk = reprojection_residual(PRIOR, s.truth.states["v0"], det.observation(s.frame.rig.intr))
    assert np.max(np.abs(blk.residual)) < 1e-10


def test_pitched_fifteen_ground_truth_normal():
    s = generate(SceneSpec(RoadProfile("pitched", 15.0, 6.0), (VehicleSpec(25.0),)))
    a = np.radians(15.0)
    np.testing.assert_allclose(s.truth.planes["v0"].normal, [0.0, -np.cos(a), -np.sin(a)], atol=1e-15)


def test_wheels_rest_on_their_patch():
    for prof in (RoadProfile("pitched", 20.0, 6.0), RoadProfile("banked", 15.0, 2.5)):
        lateral = 5.5 if prof.kind == "banked" else 0.0
        s = generate(SceneSpec(prof, (VehicleSpec(22.0, lateral, 12.0),)))
        st, road = s.truth.states["v0"], s.truth.planes["v0"]
        W = instantiate(PRIOR, st)[list(PRIOR.wheel_indices)]
        np.testing.assert_allclose([signed_distance(road, w) for w in W], PRIOR.base_height, atol=1e-12)


def test_road_points_lie_on_the_profile():
    prof = RoadProfile("piecewise", pieces=((8.0, 10.0), (16.0, 20.0)))
    s = generate(SceneSpec(prof, (VehicleSpec(10.0),)))
    P = s.truth.road_points
    np.testing.assert_allclose(P[:, 1], prof.height(P[:, 0], P[:, 2], 1.65), atol=1e-12)


def test_back_faces_are_dropped():
    s = generate(SceneSpec(vehicles=(VehicleSpec(20.0, 0.0, 0.0),)))
    det = s.frame.detections[0]
    vis = visible_keypoints(PRIOR, s.truth.states["v0"])
    np.testing.assert_array_equal(det.confidences > 0, vis)
    assert 0 < vis.sum() < PRIOR.K
    np.testing.assert_array_equal(det.keypoints2d[~vis], 0.0)


@pytest.mark.parametrize("spec", [
    lambda: RoadProfile("hilly"),
    lambda: RoadProfile("pitched", 26.0),
    lambda: RoadProfile("piecewise", pieces=((10.0, 5.0), (9.0, 5.0))),
    lambda: SceneSpec(vehicles=()),
    lambda: SceneSpec(vehicles=(VehicleSpec(-3.0),)),
    lambda: SceneSpec(noise=NoiseSpec(keypoint_dropout=1.0)),
    lambda: SceneSpec(noise=NoiseSpec(keypoint_sigma=-1.0)),
    lambda: generate(SceneSpec(vehicles=(VehicleSpec(shape=(4.0,)),))),
])
def test_invalid_specs(spec):
    with pytest.raises(InvalidSpec):
        spec()


def test_vehicle_straddling_a_kink_is_rejected():
    with pytest.raises(InvalidSpec, match="kink"):
        generate(SceneSpec(RoadProfile("pitched", 20.0, 20.0), (VehicleSpec(20.0),)))


def test_every_term_vanishes_at_truth_for_every_default_profile():
    # the disambiguation barrier is positive by construction and excluded
    seen = set()
    for spec in default_suite(seeds=1):
        kind = spec.profile.kind
        if (kind, spec.profile.angle) in seen:
            continue
        seen.add((kind, spec.profile.angle))
        r = truth_residuals(generate(spec, PRIOR), PRIOR)
        for term, v in r.items():
            if term != "disambiguation":
                assert v < 1e-10, (spec.scene_id, term, v)
    assert len(seen) == 5


def test_two_vehicle_truth_residuals_include_consistency():
    s = generate(SceneSpec(RoadProfile("pitched", 10.0, 6.0), (VehicleSpec(20.0, -2.0), VehicleSpec(22.0, 2.0))))
    r = truth_residuals(s, PRIOR)
    assert "consistency" in r
    assert max(v for k, v in r.items() if k != "disambiguation") < 1e-10


def test_bucket_boundaries():
    assert in_bucket(15.0, None, 15.0)
    assert not in_bucket(15.0 + 1e-12, None, 15.0)
    assert in_bucket(30.0, None, 30.0) and not in_bucket(30.0, 30.0, None)
    assert in_bucket(30.5, 30.0, None)
    rows = [SceneRow("a", "joint", 15.0, 1.0)]
    t = summarize(rows)
    assert t["joint"]["<=15m"]["n"] == 1 and t["joint"][">30m"]["n"] == 0


def test_bucket_arithmetic_on_three_rows():
    rows = [SceneRow("a", "joint", 10.0, 1.0), SceneRow("b", "joint", 20.0, 2.0), SceneRow("c", "joint", 40.0, 6.0),
            SceneRow("d", "joint", 12.0, None, "failed")]
    t = summarize(rows)["joint"]
    assert t["Overall"]["mean"] == pytest.approx(3.0)
    assert t["Overall"]["std"] == pytest.approx(np.sqrt((4 + 1 + 9) / 3))
    assert t["Overall"]["failed"] == 1
    assert t["<=15m"] == {"mean": 1.0, "std": 0.0, "n": 1, "failed": 1}
    assert t["<=30m"]["mean"] == pytest.approx(1.5) and t["<=30m"]["std"] == pytest.approx(0.5)
    assert t[">30m"]["mean"] == 6.0


def test_noise_monotonicity():
    means = []
    for sigma in (0.0, 1.0, 2.0, 4.0):
        rows = run_benchmark(flat_suite(seeds=20, noise=NoiseSpec(keypoint_sigma=sigma), depths=(20.0,)),
                             variants=("joint",), prior=PRIOR)
        assert all(r.error is not None for r in rows)
        means.append(np.mean([r.error for r in rows]))
    assert all(b >= a for a, b in zip(means, means[1:])), means


def test_noiseless_flat_suite_joint_below_five_centimetres():
    rows = run_benchmark(flat_suite(seeds=1), variants=("joint",), prior=PRIOR)
    assert np.mean([r.error for r in rows]) < 0.05


def test_parallel_benchmark_matches_serial():
    suite = flat_suite(seeds=1, depths=(12.0, 30.0))
    a = run_benchmark(suite, prior=PRIOR)
    b = run_benchmark(suite, prior=PRIOR, jobs=2)
    assert a == b


def test_table_shape_and_report_round_trip():
    rows = run_benchmark(flat_suite(seeds=1, depths=(12.0, 40.0)), prior=PRIOR)
    table = summarize(rows)
    assert list(table) == ["coplanar", "joint"]
    assert all(list(table[v]) == [b[0] for b in BUCKETS] for v in table)
    text = format_table(table)
    lines = text.splitlines()
    assert len(lines) == 4
    assert lines[0].split() == ["variant", "Overall", "<=15m", "<=30m", ">30m"]
    rep = json.loads(dumps_report(report_dict(rows, table)))
    assert rep["summary"] == json.loads(json.dumps(table))
    assert len(rep["rows"]) == 4


def test_empty_suite_rejected():
    with pytest.raises(ValueError):
        run_benchmark([])
