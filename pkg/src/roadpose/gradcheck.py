"""Finite-difference checks of the analytic residual Jacobians.

Every term is differentiated through the same parameter blocks the solver
uses, so rotation and unit-normal blocks are perturbed by their retractions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, PlanePatch, Rotation, frame_on_plane, project_wireframe
from .pipeline import PipelineConfig, build_problem
from .residuals import TERMS, Observation
from .shape_model import ShapePrior, VehicleState, instantiate, synthetic_prior

FD_STEP = 1e-6
FD_FLOOR = 1.0  # Jacobians with entries below one are compared absolutely
INTR = CameraIntrinsics(700.0, 700.0, 640.0, 360.0)


@dataclass
class TermCheck:
    term: str
    max_error: float
    configurations: int

    def ok(self, tol=1e-5):
        return self.configurations > 0 and self.max_error < tol


def random_prior(rng, B=5) -> ShapePrior:
    """Synthetic prior with perturbed mean and a random (non-orthogonal) basis."""
    base = synthetic_prior(B)
    mean = base.mean + 0.05 * rng.standard_normal(base.mean.shape)
    basis = 0.1 * rng.standard_normal(base.basis.shape)
    return ShapePrior(mean=mean, basis=basis, names=base.names, base_indices=base.base_indices,
                      wheel_indices=base.wheel_indices, base_height=base.base_height, edges=base.edges)


def random_configuration(rng, prior: ShapePrior, n_vehicles=2):
    """Vehicles near each other on tilted planes, with perturbed keypoints."""
    states, observations = [], []
    anchor = np.array([rng.uniform(-4, 4), 0.0, rng.uniform(10, 35)])
    for i in range(n_vehicles):
        tilt = rng.normal(size=3) * np.deg2rad(8)
        n = Rotation.from_rotvec(tilt).apply([0.0, -1.0, 0.0])
        t = anchor + np.array([rng.uniform(-3, 3), rng.uniform(-0.3, 0.3), rng.uniform(-2, 2)])
        t[1] = 1.3 + 0.3 * rng.standard_normal()
        yaw = rng.uniform(-np.pi, np.pi)
        R = frame_on_plane(n, [np.sin(yaw), 0.0, np.cos(yaw)])
        R = R.perturb(0.05 * rng.standard_normal(3))
        lam = rng.uniform(-1.0, 1.0, prior.B)
        d = float(n @ t) + 0.2 * rng.standard_normal()
        st = VehicleState(R, t, lam, PlanePatch(n, d))
        kp = project_wireframe(instantiate(prior, st), INTR) + 3.0 * rng.standard_normal((prior.K, 2))
        conf = rng.uniform(0.2, 1.0, prior.K)
        conf[rng.random(prior.K) < 0.2] = 0.0
        u0, v0 = kp.min(axis=0)
        u1, v1 = kp.max(axis=0)
        states.append(st)
        observations.append(Observation(kp, conf, (u0, v0, u1, v1), INTR))
    return states, observations


def _perturbed_plane(st, rng):
    n = Rotation.from_rotvec(0.05 * rng.standard_normal(3)).apply(st.plane.normal)
    return st.replace(plane=PlanePatch(n, st.plane.offset + 0.1 * rng.standard_normal()))


def _blocks(term, values):
    res = term.fn(values)
    return list(res) if isinstance(res, (list, tuple)) else [res]


def jacobian_errors(problem, step=FD_STEP, break_term=None):
    """Floored relative error per term name: max |J_a - J_fd| / max(max |J_fd|, 1) over blocks."""
    base = problem.values()
    worst = {}
    for term in problem.terms:
        blocks0 = _blocks(term, base)
        keys = sorted({k for b in blocks0 for k in b.jacobians}, key=repr)
        for key in keys:
            pb = problem.blocks[key]
            cols = []
            for j in range(pb.tangent_size):
                e = np.zeros(pb.tangent_size)
                e[j] = step
                vp, vm = dict(base), dict(base)
                vp[key] = pb.retract(e)
                vm[key] = pb.retract(-e)
                cols.append([(p.residual - m.residual) / (2 * step)
                             for p, m in zip(_blocks(term, vp), _blocks(term, vm))])
            for i, blk in enumerate(blocks0):
                if key not in blk.jacobians:
                    continue
                Ja = pb.lift(np.asarray(blk.jacobians[key], dtype=float))
                if break_term == blk.term:
                    Ja = Ja * 1.01 + 1e-3
                Jn = np.column_stack([c[i] for c in cols])
                scale = max(float(np.max(np.abs(Jn), initial=0.0)), FD_FLOOR)
                err = float(np.max(np.abs(Ja - Jn), initial=0.0)) / scale
                worst[blk.term] = max(worst.get(blk.term, 0.0), err)
    return worst


def check_gradients(n_configs=100, seed=0, prior=None, break_term=None):
    """Run ``jacobian_errors`` over random configurations; one ``TermCheck`` per term."""
    rng = np.random.default_rng(seed)
    prior = prior or synthetic_prior()
    cfg = PipelineConfig()
    worst = {t: 0.0 for t in TERMS}
    counts = {t: 0 for t in TERMS}
    for _ in range(n_configs):
        states, obs = random_configuration(rng, prior)
        problem, _ = build_problem(states, obs, prior, cfg)
        # measured planes differ from the current ones so the plane prior is not at its minimum
        for vid, st in enumerate(states):
            moved = _perturbed_plane(st, rng)
            problem.blocks[(vid, "plane_normal")].value = moved.plane.normal
            problem.blocks[(vid, "plane_offset")].value = np.array([moved.plane.offset])
        for term, err in jacobian_errors(problem, break_term=break_term).items():
            worst[term] = max(worst[term], err)
            counts[term] += 1
    return [TermCheck(t, worst[t], counts[t]) for t in TERMS]
