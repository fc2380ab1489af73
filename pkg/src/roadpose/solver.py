"""Robust Levenberg-Marquardt over heterogeneous parameter blocks.

Huber losses are handled by iteratively reweighted least squares, the damped
normal equations are Jacobi (diagonal) preconditioned and solved densely.
A schedule of phases selects which blocks are free in each pass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InvalidProblem, NumericalFailure, RoadposeError
from .geometry import Rotation, sphere_retract, tangent_basis
from .residuals import EnergyWeights, ResidualBlock, huber_weight, total_cost

log = logging.getLogger(__name__)

ROLES = ("rotation", "translation", "shape", "plane_normal", "plane_offset")
KINDS = ("euclidean", "rotation", "unit_normal")


def unit_normal_parameterization(n, delta):
    """Tangent-space update of a unit normal; identity at ``delta = 0``."""
    return sphere_retract(n, delta)


@dataclass
class ParameterBlock:
    key: object
    value: object
    kind: str = "euclidean"
    role: str | None = None
    bound: float | None = None
    constant: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidProblem(f"unknown block kind {self.kind!r}")
        if self.kind == "euclidean":
            self.value = np.array(self.value, dtype=float).reshape(-1)
        elif self.kind == "unit_normal":
            v = np.array(self.value, dtype=float).reshape(3)
            self.value = v / np.linalg.norm(v)
        elif not isinstance(self.value, Rotation):
            raise InvalidProblem("rotation blocks hold a Rotation")

    @property
    def tangent_size(self):
        if self.kind == "rotation":
            return 3
        if self.kind == "unit_normal":
            return 2
        return self.value.size

    def lift(self, J):
        """Map an ambient Jacobian onto this block's tangent coordinates."""
        if self.kind == "unit_normal":
            return J @ tangent_basis(self.value)
        return J

    def retract(self, delta):
        if self.kind == "rotation":
            return self.value.perturb(delta)
        if self.kind == "unit_normal":
            return unit_normal_parameterization(self.value, delta)
        v = self.value + delta
        if self.bound is not None:
            v = np.clip(v, -self.bound, self.bound)
        return v


@dataclass
class Term:
    fn: object  # values -> ResidualBlock | list[ResidualBlock]
    name: str = ""


class Problem:
    def __init__(self, weights: EnergyWeights | None = None):
        self.weights = weights or EnergyWeights()
        self.blocks: dict = {}
        self.terms: list[Term] = []

    def add_block(self, key, value, kind="euclidean", role=None, bound=None, constant=False):
        if key in self.blocks:
            raise InvalidProblem(f"duplicate parameter block {key!r}")
        self.blocks[key] = ParameterBlock(key, value, kind, role, bound, constant)
        return key

    def set_constant(self, key, constant=True):
        self.blocks[key].constant = constant

    def add_term(self, fn, name=""):
        self.terms.append(Term(fn, name))

    def values(self):
        return {k: b.value for k, b in self.blocks.items()}

    def evaluate(self, values=None):
        values = self.values() if values is None else values
        out = []
        for term in self.terms:
            res = term.fn(values)
            out.extend(res if isinstance(res, (list, tuple)) else [res])
        for blk in out:
            for key in blk.jacobians:
                if key not in self.blocks:
                    raise InvalidProblem(f"term {blk.term!r} references unregistered block {key!r}")
        return out

    def cost(self, blocks):
        return total_cost(blocks, self.weights)


@dataclass(frozen=True)
class Phase:
    name: str
    roles: frozenset

    @classmethod
    def of(cls, name, *roles):
        bad = set(roles) - set(ROLES)
        if bad:
            raise ValueError(f"unknown roles {sorted(bad)}")
        return cls(name, frozenset(roles))


def default_schedule():
    return [
        Phase.of("pose", "rotation", "translation"),
        Phase.of("shape", "shape"),
        Phase.of("pose", "rotation", "translation"),
        Phase.of("joint", *ROLES),
    ]


@dataclass
class SolverConfig:
    max_iterations: int = 100
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    max_damping: float = 1e14
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    cost_tolerance: float = 1e-10
    jacobi: bool = True
    schedule: list = field(default_factory=default_schedule)

    def __post_init__(self):
        if min(self.gradient_tolerance, self.step_tolerance, self.cost_tolerance) <= 0:
            raise ValueError("tolerances must be positive")
        if not self.schedule:
            raise ValueError("schedule must contain at least one phase")

    def replace(self, **kw):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return SolverConfig(**d)


@dataclass
class PhaseReport:
    name: str
    initial_cost: float
    final_cost: float
    iterations: int
    reason: str
    accepted_costs: list = field(default_factory=list)


@dataclass
class SolveReport:
    phases: list
    values: dict

    @property
    def initial_cost(self):
        return self.phases[0].initial_cost

    @property
    def final_cost(self):
        return self.phases[-1].final_cost


def _linearize(problem, blocks, free, layout, n):
    rows_J, rows_r = [], []
    w = problem.weights
    for b in blocks:
        m = b.residual.size
        if m == 0:
            continue
        eta = w.eta(b.term)
        if eta == 0.0:
            continue
        scale = eta * (huber_weight(b.residual, b.deltas) if w.robust else np.ones(m))
        sq = np.sqrt(scale)
        J = np.zeros((m, n))
        touched = False
        for key, Jb in b.jacobians.items():
            if key in layout:
                lo, hi = layout[key]
                J[:, lo:hi] += free[key].lift(Jb)
                touched = True
        if not touched:
            continue
        rows_J.append(sq[:, None] * J)
        rows_r.append(sq * b.residual)
    if not rows_J:
        return np.zeros((0, n)), np.zeros(0)
    return np.vstack(rows_J), np.concatenate(rows_r)


def _solve_damped(A, g, mu, jacobi):
    n = A.shape[0]
    if jacobi:
        d = np.diag(A).copy()
        d[d <= 0] = 1.0
        s = 1.0 / np.sqrt(d)
    else:
        s = np.ones(n)
    M = (A * s[:, None]) * s[None, :] + mu * np.eye(n)
    rhs = -s * g
    try:
        c = scipy.linalg.cho_factor(M, check_finite=True)
        y = scipy.linalg.cho_solve(c, rhs)
    except (np.linalg.LinAlgError, ValueError):
        return None
    if not np.all(np.isfinite(y)):
        return None
    return s * y


def _run_phase(problem: Problem, phase: Phase, cfg: SolverConfig) -> PhaseReport:
    free = {k: b for k, b in problem.blocks.items() if b.role in phase.roles and not b.constant}
    if not free:
        raise InvalidProblem(f"phase {phase.name!r} has no free parameter blocks")
    layout, n = {}, 0
    for k, b in free.items():
        layout[k] = (n, n + b.tangent_size)
        n += b.tangent_size

    blocks = problem.evaluate()
    cost = problem.cost(blocks)
    report = PhaseReport(phase.name, cost, cost, 0, "max_iterations", [cost])
    if cost == 0.0:
        report.reason = "zero_cost"
        return report
    mu = cfg.initial_damping
    relinearize = True
    it = 0
    while it < cfg.max_iterations:
        if relinearize:
            J, r = _linearize(problem, blocks, free, layout, n)
            A = J.T @ J
            g = J.T @ r
            # scale-free test: cosine between the residual and every Jacobian column
            gscale = np.sqrt(np.maximum(np.diag(A), 1e-300)) * max(float(np.linalg.norm(r)), 1e-300)
            if np.max(np.abs(g / gscale)) < cfg.gradient_tolerance:
                report.reason = "gradient"
                break
            relinearize = False
        it += 1
        delta = _solve_damped(A, g, mu, cfg.jacobi)
        if delta is None:
            mu *= cfg.damping_up
            if mu > cfg.max_damping:
                raise NumericalFailure(f"damped normal matrix singular in phase {phase.name!r}")
            continue
        xnorm = np.sqrt(sum(float(np.sum(np.square(_as_vector(free[k].value)))) for k in free))
        if np.linalg.norm(delta) <= cfg.step_tolerance * (xnorm + cfg.step_tolerance):
            report.reason = "step"
            break
        trial = problem.values()
        for k, (lo, hi) in layout.items():
            trial[k] = free[k].retract(delta[lo:hi])
        try:
            new_blocks = problem.evaluate(trial)
            new_cost = problem.cost(new_blocks)
        except (RoadposeError, ValueError, FloatingPointError):
            new_cost = np.inf
        if np.isfinite(new_cost) and new_cost < cost:
            for k in layout:
                free[k].value = trial[k]
            rel = (cost - new_cost) / max(cost, 1e-300)
            cost, blocks = new_cost, new_blocks
            report.accepted_costs.append(cost)
            mu = max(mu * cfg.damping_down, 1e-15)
            relinearize = True
            if rel < cfg.cost_tolerance or cost == 0.0:
                report.reason = "cost"
                break
        else:
            mu *= cfg.damping_up
            if mu > cfg.max_damping:
                report.reason = "damping"
                break
    report.iterations = it
    report.final_cost = cost
    return report


def _as_vector(v):
    if isinstance(v, Rotation):
        return v.as_rotvec()
    return np.asarray(v, dtype=float)


def solve(problem: Problem, config: SolverConfig | None = None) -> SolveReport:
    cfg = config or SolverConfig()
    if not problem.terms:
        raise InvalidProblem("problem has no residual terms")
    problem.evaluate()  # surfaces unbound blocks before any iteration
    phases = []
    for phase in cfg.schedule:
        rep = _run_phase(problem, phase, cfg)
        log.debug("phase %s: %.6g -> %.6g in %d its (%s)", rep.name, rep.initial_cost, rep.final_cost,
                  rep.iterations, rep.reason)
        phases.append(rep)
    return SolveReport(phases, problem.values())


def quadratic_residual(fn_jac, key, term="reprojection", delta=np.inf):
    """Wrap ``x -> (r, J)`` as a problem term on a single block (testing helper)."""

    def fn(values):
        r, J = fn_jac(values[key])
        return ResidualBlock(term, r, delta, {key: J})

    return fn
