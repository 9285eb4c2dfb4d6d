"""Randomized audit of adjoint gradients against finite differences.

Draws feasible OCP instances per variant, solves them, and compares the
adjoint product seeded on u_0 against central differences of re-solved
instances. Instances whose strict-complementarity margin is below the
differentiability threshold are reported separately instead of compared,
since the solution map is only one-sided differentiable there.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import BicycleModel, Track, VehicleParams
from .errors import MimicMpcError
from .mpc import MpcParams, OcpSpec, Variant, solve
from .sensitivity import adjoint_solve, kkt_system, seed_on_u0

MARGIN_EXCLUDE = 1.0e-6
FD_STEP = 1.0e-5
# below this magnitude both gradients are numerically zero: central
# differences of a ~0.1-magnitude action at step 1e-5 resolve ~1e-11
ZERO_GRADIENT_FLOOR = 1.0e-8


def sample_instance(rng: np.random.Generator, variant: Variant, track: Track,
                    vehicle: VehicleParams, horizon: int = 7):
    """One random feasible OCP instance (spec, params, x0, model)."""
    spec = OcpSpec(variant=variant, horizon=horizon)
    model = BicycleModel(track, vehicle, spec.dt, variant.augmented)
    x0 = np.array([
        rng.uniform(-0.03, 0.03),
        rng.uniform(-0.2, 0.2),
        rng.uniform(0.0, track.length),
        rng.uniform(-1.0, 1.0),
        rng.uniform(-0.15, 0.15),
    ])
    if variant.augmented:
        x0 = np.append(x0, rng.uniform(-0.15, 0.15))
    if variant is Variant.WEIGHTS:
        theta = np.append(rng.uniform(-1.0, 1.0, 3), rng.uniform(-0.8, 0.8))
    elif variant is Variant.SETPOINT_ANGLE:
        theta = np.array([rng.uniform(-1.2, 1.2), rng.uniform(-0.12, 0.12)])
    else:
        theta = np.array([rng.uniform(-1.2, 1.2), rng.uniform(-0.12, 0.12),
                          rng.uniform(-1.0, 1.0)])
    return spec, MpcParams(variant, theta), x0, model


@dataclass
class DiffCheckRow:
    instance_id: str
    param_index: int
    adjoint: float
    fd: float
    rel_err: float


@dataclass
class DiffCheckReport:
    rows: list
    excluded: list          # (instance_id, margin) with weak complementarity
    max_rel_err: float

    def to_csv(self, path) -> None:
        lines = ["instance_id,param_index,adjoint,fd,rel_err"]
        lines += [f"{r.instance_id},{r.param_index},{r.adjoint:.12e},"
                  f"{r.fd:.12e},{r.rel_err:.6e}" for r in self.rows]
        lines.append(f"# excluded_weak_complementarity={len(self.excluded)}")
        lines.append(f"# max_rel_err={self.max_rel_err:.6e}")
        Path(path).write_text("\n".join(lines) + "\n")


def fd_gradient_u0(spec, params, x0, model, base_point, step=FD_STEP):
    """Central differences of u_0 w.r.t. every parameter coordinate."""
    grad = np.empty(params.variant.theta_dim)
    for j in range(grad.size):
        plus = MpcParams(params.variant, params.values.copy())
        plus.values[j] += step
        minus = MpcParams(params.variant, params.values.copy())
        minus.values[j] -= step
        up = solve(spec, plus, x0, model, warm_start=base_point).u0
        dn = solve(spec, minus, x0, model, warm_start=base_point).u0
        grad[j] = (up - dn) / (2.0 * step)
    return grad


def run_diffcheck(n_instances: int, seed: int, track: Track,
                  vehicle: VehicleParams | None = None,
                  variants=tuple(Variant), horizon: int = 7) -> DiffCheckReport:
    vehicle = vehicle or VehicleParams()
    rng = np.random.default_rng(seed)
    rows, excluded = [], []
    max_rel = 0.0
    for variant in variants:
        produced = 0
        while produced < n_instances:
            spec, params, x0, model = sample_instance(rng, variant, track,
                                                      vehicle, horizon)
            instance_id = f"{variant.value}-{produced:03d}"
            try:
                point = solve(spec, params, x0, model)
            except MimicMpcError:
                continue  # infeasible draw; redraw deterministically
            produced += 1
            if point.strict_comp_margin < MARGIN_EXCLUDE:
                excluded.append((instance_id, point.strict_comp_margin))
                continue
            core = kkt_system(point, spec, params, x0, model)
            adj = adjoint_solve(core, seed_u=seed_on_u0(point))
            fd = fd_gradient_u0(spec, params, x0, model, point)
            if (np.max(np.abs(fd)) < ZERO_GRADIENT_FLOOR
                    and np.max(np.abs(adj)) < ZERO_GRADIENT_FLOOR):
                # pinned solution: both methods agree the gradient vanishes
                for j in range(adj.size):
                    rows.append(DiffCheckRow(instance_id, j, float(adj[j]),
                                             float(fd[j]), 0.0))
                continue
            scale = max(float(np.max(np.abs(fd))), 1e-10)
            for j in range(adj.size):
                rel = abs(adj[j] - fd[j]) / scale
                max_rel = max(max_rel, rel)
                rows.append(DiffCheckRow(instance_id, j, float(adj[j]),
                                         float(fd[j]), rel))
    return DiffCheckReport(rows=rows, excluded=excluded, max_rel_err=max_rel)
