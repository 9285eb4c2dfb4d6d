"""Finite-horizon constrained lane-keeping OCP and its SQP solver.

Transcription is direct multiple shooting: the decision vector stacks, per
stage k = 0..N-1, the control u_k, the successor state x_{k+1} and one lane
slack s_{k+1}:

    z = [u_0, x_1, s_1, u_1, x_2, s_2, ..., u_{N-1}, x_N, s_N]

The initial state is data, not a decision variable. The lane constraint is
softened by the nonnegative slack with a large L1 weight so that rollouts
starting outside the lane remain solvable; a nonzero slack is reported and
counts as a constraint violation downstream.

The SQP loop uses the exact (Gauss-Newton, here exact) Hessian of the
quadratic cost, exact constraint Jacobians, a primal-dual active-set QP
subproblem solver and an l1-penalty merit line search. After convergence an
optional Newton "polish" on the active KKT system with the exact Lagrangian
Hessian drives residuals to near machine precision, which downstream
finite-difference oracles rely on.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.sparse.linalg import splu

from .dynamics import IX_D, IX_PHI
from .errors import GuardViolation, SolverError


class Variant(str, enum.Enum):
    """Objective parametrizations of the learnable controller."""

    WEIGHTS = "weights"                # theta = (log Wd, log Wphi, log Wdelta, dbar)
    SETPOINT_ANGLE = "setpoint_angle"  # theta = (dbar, phibar), Wdelta = 1 fixed
    SETPOINT_RATE = "setpoint_rate"    # theta = (dbar, phibar, log Wrate), augmented

    @property
    def theta_dim(self) -> int:
        return {Variant.WEIGHTS: 4, Variant.SETPOINT_ANGLE: 2,
                Variant.SETPOINT_RATE: 3}[self]

    @property
    def augmented(self) -> bool:
        return self is Variant.SETPOINT_RATE

    @property
    def control_mode(self) -> str:
        return "delta_rate" if self.augmented else "delta"


@dataclass
class MpcParams:
    """Learnable parameter vector of one objective variant.

    Weights are stored in log space, so the recovered weights are strictly
    positive for any real-valued parameter vector.
    """

    variant: Variant
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).copy()
        if self.values.shape != (self.variant.theta_dim,):
            raise ValueError(
                f"{self.variant.value} expects {self.variant.theta_dim} "
                f"parameters, got shape {self.values.shape}")

    @classmethod
    def zeros(cls, variant: Variant) -> "MpcParams":
        return cls(variant, np.zeros(variant.theta_dim))

    def coefficients(self):
        """(w_d, w_phi, w_u, dbar, phibar) of the stage cost."""
        v = self.values
        if self.variant is Variant.WEIGHTS:
            return math.exp(v[0]), math.exp(v[1]), math.exp(v[2]), v[3], 0.0
        if self.variant is Variant.SETPOINT_ANGLE:
            return 1.0, 1.0, 1.0, v[0], v[1]
        return 1.0, 1.0, math.exp(v[2]), v[0], v[1]

    def with_setpoints(self, dbar: float, phibar: float) -> "MpcParams":
        """Copy with the tracked setpoints replaced (hierarchical use)."""
        if self.variant is Variant.WEIGHTS:
            raise ValueError("the weights variant has no setpoint slots")
        vals = self.values.copy()
        vals[0], vals[1] = dbar, phibar
        return MpcParams(self.variant, vals)


def horizon_steps(d_la: float, v_x: float, dt: float) -> int:
    """Prediction steps for a spatial lookahead: round(d_la/(v_x dt)), ties up."""
    if d_la <= 0 or v_x <= 0 or dt <= 0:
        raise ValueError("d_la, v_x and dt must be positive")
    return max(1, int(math.floor(d_la / (v_x * dt) + 0.5)))


def stage_cost(x, u, params: MpcParams) -> float:
    """One-stage objective value; x and u are raw arrays."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    want_nx = 6 if params.variant.augmented else 5
    if x.shape[0] != want_nx:
        raise ValueError(
            f"{params.variant.value} expects {want_nx}-dimensional states, "
            f"got {x.shape[0]}")
    w_d, w_phi, w_u, dbar, phibar = params.coefficients()
    return float(w_d * (x[IX_D] - dbar) ** 2 + w_phi * (x[IX_PHI] - phibar) ** 2
                 + w_u * u[0] ** 2)


@dataclass
class OcpSpec:
    """Problem geometry, box limits and solver options for one OCP family."""

    variant: Variant
    horizon: int
    dt: float = 0.1
    d_la: float | None = None
    lane_half_width: float = 1.75
    delta_max: float = 0.6
    delta_rate_max: float = 1.0
    beta_max: float = 0.3
    psi_dot_max: float = 1.5
    slack_weight: float = 1.0e4
    # tiny quadratic slack term: leaves the minimizer of the L1 penalty
    # unchanged (the slack objective stays increasing on s >= 0) but makes
    # the KKT systems nonsingular in the slack coordinates
    slack_quadratic: float = 1.0
    cost_constant: float = 0.0
    tol: float = 1.0e-6
    max_iter: int = 50
    polish: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @classmethod
    def for_lookahead(cls, variant: Variant, d_la: float, v_x: float,
                      dt: float = 0.1, **kwargs) -> "OcpSpec":
        return cls(variant=variant, horizon=horizon_steps(d_la, v_x, dt),
                   dt=dt, d_la=d_la, **kwargs)

    @property
    def control_limit(self) -> float:
        return self.delta_rate_max if self.variant.augmented else self.delta_max


@dataclass
class KktPoint:
    """Primal-dual solution of one OCP solve with residual metadata."""

    x: np.ndarray            # (N+1, nx) including the fixed initial state
    u: np.ndarray            # (N, nu)
    slack: np.ndarray        # (N,)
    lam: np.ndarray          # (N, nx) dynamics multipliers
    mu: np.ndarray           # (m_in,) inequality multipliers, >= 0
    active_set: np.ndarray   # bool mask, |h_i| <= 1e-6
    working_set: np.ndarray  # bool mask used by the QP (warm-start aid)
    kkt_residual: float
    residuals: tuple         # (stationarity, feasibility, complementarity)
    iterations: int
    cost: float
    strict_comp_margin: float
    slack_max: float

    @property
    def u0(self) -> float:
        return float(self.u[0, 0])


ACTIVE_TOL = 1.0e-6

# inequality row kinds, in build order
ROW_U_HI, ROW_U_LO = "u_hi", "u_lo"
ROW_LANE_HI, ROW_LANE_LO, ROW_SLACK = "lane_hi", "lane_lo", "slack_pos"
ROW_BETA_HI, ROW_BETA_LO = "beta_hi", "beta_lo"
ROW_PSID_HI, ROW_PSID_LO = "psid_hi", "psid_lo"
ROW_DELTA_HI, ROW_DELTA_LO = "delta_hi", "delta_lo"


class OcpProblem:
    """Assembled matrices and index maps of one OCP instance.

    Owns the decision-vector layout, constant cost Hessian, constant
    inequality system G z <= h, defect evaluation, Jacobians and the exact
    Lagrangian Hessian used by the polish step and by sensitivity analysis.
    """

    def __init__(self, spec: OcpSpec, params: MpcParams, x0, model):
        if model.nx != (6 if spec.variant.augmented else 5):
            raise ValueError("model state dimension inconsistent with variant")
        if spec.variant is not params.variant:
            raise ValueError("spec and params disagree on the variant")
        self.spec = spec
        self.params = params
        self.model = model
        self.x0 = np.asarray(x0, dtype=float).copy()
        if self.x0.shape != (model.nx,):
            raise ValueError(f"x0 must have shape ({model.nx},)")

        self.N = spec.horizon
        self.nx = model.nx
        self.nu = model.nu
        self.block = self.nu + self.nx + 1
        self.nz = self.N * self.block
        self.m_eq = self.N * self.nx

        self._build_inequalities()
        self._build_cost()

    # ----- decision vector layout -------------------------------------

    def u_index(self, k: int) -> int:
        return k * self.block

    def x_index(self, k: int) -> int:
        """Start of state x_k in z (k >= 1)."""
        return (k - 1) * self.block + self.nu

    def s_index(self, k: int) -> int:
        """Slack s_k in z (k >= 1)."""
        return (k - 1) * self.block + self.nu + self.nx

    def pack(self, xs, us, ss) -> np.ndarray:
        z = np.empty(self.nz)
        for k in range(self.N):
            z[self.u_index(k):self.u_index(k) + self.nu] = us[k]
            z[self.x_index(k + 1):self.x_index(k + 1) + self.nx] = xs[k + 1]
            z[self.s_index(k + 1)] = ss[k]
        return z

    def unpack(self, z):
        xs = np.empty((self.N + 1, self.nx))
        us = np.empty((self.N, self.nu))
        ss = np.empty(self.N)
        xs[0] = self.x0
        for k in range(self.N):
            us[k] = z[self.u_index(k):self.u_index(k) + self.nu]
            xs[k + 1] = z[self.x_index(k + 1):self.x_index(k + 1) + self.nx]
            ss[k] = z[self.s_index(k + 1)]
        return xs, us, ss

    # ----- inequalities -------------------------------------------------

    def _build_inequalities(self):
        spec = self.spec
        rows = []      # (kind, stage, [(zidx, coeff), ...], rhs)
        u_max = spec.control_limit
        for k in range(self.N):
            iu = self.u_index(k)
            rows.append((ROW_U_HI, k, [(iu, 1.0)], u_max))
            rows.append((ROW_U_LO, k, [(iu, -1.0)], u_max))
        for k in range(1, self.N + 1):
            ix = self.x_index(k)
            isl = self.s_index(k)
            w2 = spec.lane_half_width
            rows.append((ROW_LANE_HI, k, [(ix + IX_D, 1.0), (isl, -1.0)], w2))
            rows.append((ROW_LANE_LO, k, [(ix + IX_D, -1.0), (isl, -1.0)], w2))
            rows.append((ROW_SLACK, k, [(isl, -1.0)], 0.0))
            rows.append((ROW_BETA_HI, k, [(ix + 0, 1.0)], spec.beta_max))
            rows.append((ROW_BETA_LO, k, [(ix + 0, -1.0)], spec.beta_max))
            rows.append((ROW_PSID_HI, k, [(ix + 1, 1.0)], spec.psi_dot_max))
            rows.append((ROW_PSID_LO, k, [(ix + 1, -1.0)], spec.psi_dot_max))
            if spec.variant.augmented:
                rows.append((ROW_DELTA_HI, k, [(ix + 5, 1.0)], spec.delta_max))
                rows.append((ROW_DELTA_LO, k, [(ix + 5, -1.0)], spec.delta_max))

        self.m_in = len(rows)
        self.G = np.zeros((self.m_in, self.nz))
        self.h = np.empty(self.m_in)
        self.row_kind = []
        self.row_stage = np.empty(self.m_in, dtype=int)
        kind_stage_to_row = {}
        for i, (kind, stage, entries, rhs) in enumerate(rows):
            for zidx, coeff in entries:
                self.G[i, zidx] = coeff
            self.h[i] = rhs
            self.row_kind.append(kind)
            self.row_stage[i] = stage
            kind_stage_to_row[(kind, stage)] = i

        self.pair_rows = []
        for (kind_hi, kind_lo) in ((ROW_U_HI, ROW_U_LO), (ROW_LANE_HI, ROW_LANE_LO),
                                   (ROW_BETA_HI, ROW_BETA_LO),
                                   (ROW_PSID_HI, ROW_PSID_LO),
                                   (ROW_DELTA_HI, ROW_DELTA_LO)):
            for (kind, stage), row in kind_stage_to_row.items():
                if kind == kind_hi:
                    self.pair_rows.append((row, kind_stage_to_row[(kind_lo, stage)]))
        self.stage_slack_rows = [
            (kind_stage_to_row[(ROW_LANE_HI, k)],
             kind_stage_to_row[(ROW_LANE_LO, k)],
             kind_stage_to_row[(ROW_SLACK, k)])
            for k in range(1, self.N + 1)
        ]

    # ----- cost ----------------------------------------------------------

    def _build_cost(self):
        w_d, w_phi, w_u, dbar, phibar = self.params.coefficients()
        self._coeffs = (w_d, w_phi, w_u, dbar, phibar)
        hdiag = np.zeros(self.nz)
        glin = np.zeros(self.nz)
        for k in range(self.N):
            iu = self.u_index(k)
            hdiag[iu] = 2.0 * w_u
            glin[self.s_index(k + 1)] = self.spec.slack_weight
            hdiag[self.s_index(k + 1)] = 2.0 * self.spec.slack_quadratic
        for k in range(1, self.N):  # stage costs use x_0..x_{N-1}; x_N is free
            ix = self.x_index(k)
            hdiag[ix + IX_D] = 2.0 * w_d
            hdiag[ix + IX_PHI] = 2.0 * w_phi
            glin[ix + IX_D] = -2.0 * w_d * dbar
            glin[ix + IX_PHI] = -2.0 * w_phi * phibar
        const = float(
            w_d * (self.x0[IX_D] - dbar) ** 2
            + w_phi * (self.x0[IX_PHI] - phibar) ** 2
            + (self.N - 1) * (w_d * dbar ** 2 + w_phi * phibar ** 2)
            + self.N * self.spec.cost_constant
        )
        self.cost_hdiag = hdiag
        self.cost_glin = glin
        self.cost_const = const

    def cost(self, z) -> float:
        return float(0.5 * z @ (self.cost_hdiag * z) + self.cost_glin @ z
                     + self.cost_const)

    def cost_grad(self, z) -> np.ndarray:
        return self.cost_hdiag * z + self.cost_glin

    def cost_grad_dtheta(self, z) -> np.ndarray:
        """d(cost gradient)/d(theta), shape (nz, theta_dim)."""
        w_d, w_phi, w_u, dbar, phibar = self._coeffs
        variant = self.params.variant
        out = np.zeros((self.nz, variant.theta_dim))
        for k in range(self.N):
            iu = self.u_index(k)
            uk = z[iu]
            if variant is Variant.WEIGHTS:
                out[iu, 2] = 2.0 * w_u * uk
            elif variant is Variant.SETPOINT_RATE:
                out[iu, 2] = 2.0 * w_u * uk
        for k in range(1, self.N):
            ix = self.x_index(k)
            dk, pk = z[ix + IX_D], z[ix + IX_PHI]
            if variant is Variant.WEIGHTS:
                out[ix + IX_D, 0] = 2.0 * w_d * (dk - dbar)
                out[ix + IX_D, 3] = -2.0 * w_d
                out[ix + IX_PHI, 1] = 2.0 * w_phi * pk
            else:
                out[ix + IX_D, 0] = -2.0 * w_d
                out[ix + IX_PHI, 1] = -2.0 * w_phi
        return out

    # ----- dynamics ------------------------------------------------------

    def defects(self, xs, us) -> np.ndarray:
        return xs[1:] - self.model.step_batch(xs[:-1], us)

    def linearize(self, xs, us):
        """Stage Jacobians and the stacked equality Jacobian A_eq (m_eq x nz)."""
        As, Bs = self.model.jacobians_batch(xs[:-1], us)
        A_eq = np.zeros((self.m_eq, self.nz))
        eye = np.eye(self.nx)
        for k in range(self.N):
            r = k * self.nx
            A_eq[r:r + self.nx, self.x_index(k + 1):self.x_index(k + 1) + self.nx] \
                = eye
            A_eq[r:r + self.nx, self.u_index(k):self.u_index(k) + self.nu] = -Bs[k]
            if k >= 1:
                A_eq[r:r + self.nx, self.x_index(k):self.x_index(k) + self.nx] = -As[k]
        return As, Bs, A_eq

    def stage_hessian_contracts(self, xs, us, lam) -> np.ndarray:
        """All lam_k-contracted step Hessians, one batched complex-step pass."""
        nx, nu, N = self.nx, self.nu, self.N
        n = nx + nu
        if not hasattr(self.model, "jacobians_batch"):
            return np.array([self.model.hessian_contract(xs[k], us[k], lam[k])
                             for k in range(N)])
        from .dynamics import _CSTEP
        X = np.repeat(xs[:N].astype(complex), n, axis=0)
        U = np.repeat(us.astype(complex), n, axis=0)
        for j in range(nx):
            X[j::n, j] += 1j * _CSTEP
        for j in range(nu):
            U[nx + j::n, j] += 1j * _CSTEP
        A, B = self.model.jacobians_batch(X, U)
        if not np.iscomplexobj(A):  # linear model: no curvature
            return np.zeros((N, n, n))
        lam_rep = np.repeat(lam, n, axis=0)[:, :, None]
        jt_lam = np.concatenate([(A.transpose(0, 2, 1) @ lam_rep)[:, :, 0],
                                 (B.transpose(0, 2, 1) @ lam_rep)[:, :, 0]],
                                axis=1)
        M = np.imag(jt_lam).reshape(N, n, n).transpose(0, 2, 1) / _CSTEP
        return 0.5 * (M + M.transpose(0, 2, 1))

    def lagrangian_hessian(self, xs, us, lam) -> np.ndarray:
        """Exact Hessian of the Lagrangian w.r.t. z (cost + dynamics curvature)."""
        H = np.diag(self.cost_hdiag)
        Ms = self.stage_hessian_contracts(xs, us, lam)
        for k in range(self.N):
            M = Ms[k]
            iu, ix = self.u_index(k), self.x_index(k)
            # c_k = x_{k+1} - f(x_k, u_k): curvature enters with a minus sign
            H[iu:iu + self.nu, iu:iu + self.nu] -= M[self.nx:, self.nx:]
            if k >= 1:
                H[ix:ix + self.nx, ix:ix + self.nx] -= M[:self.nx, :self.nx]
                H[ix:ix + self.nx, iu:iu + self.nu] -= M[:self.nx, self.nx:]
                H[iu:iu + self.nu, ix:ix + self.nx] -= M[self.nx:, :self.nx]
        return H

    # ----- residuals ------------------------------------------------------

    def residual_norms(self, z, lam, mu, A_eq=None, c=None):
        xs, us, _ = self.unpack(z)
        if c is None:
            c = self.defects(xs, us)
        if A_eq is None:
            _, _, A_eq = self.linearize(xs, us)
        stat = self.cost_grad(z) + A_eq.T @ lam.ravel() + self.G.T @ mu
        hval = self.G @ z - self.h
        stationarity = float(np.max(np.abs(stat)))
        feasibility = float(max(np.max(np.abs(c)), max(0.0, np.max(hval))))
        comp = float(np.max(np.abs(mu * hval)))
        dual_neg = float(max(0.0, -np.min(mu))) if mu.size else 0.0
        complementarity = max(comp, dual_neg)
        return stationarity, feasibility, complementarity


# ---------------------------------------------------------------------------
# Primal-dual active-set QP
# ---------------------------------------------------------------------------

_QP_FEAS_TOL = 1.0e-9
_QP_MU_TOL = 1.0e-9
_INDEP_TOL = 1.0e-8
_EQ_PRIORITY = 1.0e8


def _filter_dependent_rows(problem: OcpProblem, A_eq, W) -> np.ndarray:
    """Drop working rows that are linear combinations of [A_eq; G_W].

    Pivoted QR on the stacked constraint rows; equalities are scaled up so
    the pivoting always prefers them over working inequality rows.
    """
    idx = np.flatnonzero(W)
    if idx.size == 0:
        return W
    C = np.vstack([A_eq * _EQ_PRIORITY, problem.G[idx]])
    r_fact, piv = scipy.linalg.qr(C.T, mode="r", pivoting=True)
    diag = np.abs(np.diag(r_fact[:min(C.shape), :min(C.shape)]))
    if diag.size == 0:
        return W
    rank_tol = diag[0] * max(C.shape) * np.finfo(float).eps
    rank = int(np.sum(diag > rank_tol))
    kept = set(piv[:rank])
    m_eq = A_eq.shape[0]
    out = np.zeros_like(W)
    for j, row in enumerate(idx):
        if (m_eq + j) in kept:
            out[row] = True
    return out


class _RowSpace:
    """Orthonormal basis of [A_eq; G_W] rows for independence tests."""

    def __init__(self, A_eq, G_W):
        C = np.vstack([A_eq, G_W]) if G_W.size else A_eq
        self.q, _ = scipy.linalg.qr(C.T, mode="economic")

    def is_independent(self, row) -> bool:
        r = row - self.q @ (self.q.T @ row)
        return np.linalg.norm(r) > _INDEP_TOL * max(1.0, np.linalg.norm(row))


def solve_qp(problem: OcpProblem, H, g, A_eq, b_eq, h_shift, W0,
             max_iter: int = 200):
    """min 1/2 p'Hp + g'p  s.t.  A_eq p = b_eq,  G p <= h_shift.

    Active-set iteration: solve the equality-constrained KKT system on the
    working set, drop the most negative multiplier, or add the most
    violated constraint (releasing a dependent working row via a dual ratio
    test when necessary) until the KKT conditions of the QP hold.
    Independence bookkeeping is lazy: warm-started solves that keep their
    working set never pay for it.
    """
    G, m_in = problem.G, problem.m_in
    nz, m_eq = problem.nz, problem.m_eq

    W = W0.copy()
    # warm-start heuristic: pin each stage slack unless a lane row does
    for hi, lo, sl in problem.stage_slack_rows:
        if not (W[hi] or W[lo] or W[sl]):
            W[sl] = True
    seen = set()
    rowspace = None
    filtered = False

    for _ in range(max_iter):
        idx = np.flatnonzero(W)
        na = idx.size
        dim = nz + m_eq + na
        KKT = np.zeros((dim, dim))
        KKT[:nz, :nz] = H
        KKT[:nz, nz:nz + m_eq] = A_eq.T
        KKT[nz:nz + m_eq, :nz] = A_eq
        if na:
            KKT[:nz, nz + m_eq:] = G[idx].T
            KKT[nz + m_eq:, :nz] = G[idx]
        rhs = np.concatenate([-g, b_eq, h_shift[idx]])
        try:
            sol = np.linalg.solve(KKT, rhs)
        except np.linalg.LinAlgError as exc:
            if filtered:
                raise SolverError(f"singular QP KKT system ({exc})") from exc
            W = _filter_dependent_rows(problem, A_eq, W)
            filtered = True
            rowspace = None
            continue
        p = sol[:nz]
        lam = sol[nz:nz + m_eq]
        mu = np.zeros(m_in)
        mu[idx] = sol[nz + m_eq:]

        if na and np.min(mu[idx]) < -_QP_MU_TOL:
            drop = idx[int(np.argmin(mu[idx]))]
            W[drop] = False
            rowspace = None
            filtered = False
            continue

        viol = G @ p - h_shift
        worst = int(np.argmax(viol))
        if viol[worst] <= _QP_FEAS_TOL:
            return p, lam, mu, W

        key = (W.tobytes(), worst)
        if key in seen:
            raise SolverError("active-set cycling in QP subproblem")
        seen.add(key)

        if rowspace is None:
            rowspace = _RowSpace(A_eq, G[idx])
        if rowspace.is_independent(G[worst]):
            W[worst] = True
            rowspace = None  # rebuilt on the next add/check
            continue
        # dependent candidate: dual ratio test (Goldfarb-Idnani style).
        # Express the candidate in the working rows; only rows entering with
        # a positive coefficient can be released to admit it, and dropping
        # argmin mu/coeff keeps the remaining multipliers nonnegative.
        rows = np.vstack([A_eq, G[idx]]) if na else A_eq
        coeff, *_ = np.linalg.lstsq(rows.T, G[worst], rcond=None)
        releasable = [(mu[idx[j]] / coeff[m_eq + j], idx[j])
                      for j in range(na) if coeff[m_eq + j] > 1e-8]
        if not releasable:
            raise SolverError("infeasible QP subproblem (dependent violation)")
        _, drop = min(releasable)
        W[drop] = False
        W[worst] = True
        rowspace = None
        filtered = False
    raise SolverError("QP active-set iteration limit exceeded")


# ---------------------------------------------------------------------------
# SQP driver
# ---------------------------------------------------------------------------

def _initial_iterate(problem: OcpProblem, warm_start: KktPoint | None):
    spec, model, N = problem.spec, problem.model, problem.N
    u_max = spec.control_limit
    if warm_start is not None:
        us = np.clip(warm_start.u.copy(), -u_max, u_max)
        xs = warm_start.x.copy()
        xs[0] = problem.x0
        W0 = warm_start.working_set.copy()
    else:
        us = np.zeros((N, model.nu))
        xs = np.empty((N + 1, model.nx))
        xs[0] = problem.x0
        for k in range(N):
            xs[k + 1] = model.step(xs[k], us[k])
        W0 = np.zeros(problem.m_in, dtype=bool)
    # clip predicted states into their boxes so the iterate is G-feasible
    xs[1:, 0] = np.clip(xs[1:, 0], -spec.beta_max, spec.beta_max)
    xs[1:, 1] = np.clip(xs[1:, 1], -spec.psi_dot_max, spec.psi_dot_max)
    if spec.variant.augmented:
        xs[1:, 5] = np.clip(xs[1:, 5], -spec.delta_max, spec.delta_max)
    ss = np.maximum(0.0, np.abs(xs[1:, IX_D]) - spec.lane_half_width)
    if warm_start is not None:
        ss = np.maximum(ss, warm_start.slack)
    return xs, us, ss, W0


def _merit(problem: OcpProblem, z, nu_pen: float) -> float:
    xs, us, _ = problem.unpack(z)
    try:
        c = problem.defects(xs, us)
    except GuardViolation:
        return np.inf
    return problem.cost(z) + nu_pen * float(np.sum(np.abs(c)))


def _polish(problem: OcpProblem, z, lam, mu, W, steps: int = 3):
    """Newton iterations on the active KKT system with the exact Hessian.

    The KKT matrix is assembled and factorized once at the entry point and
    reused for the few steps (the iterate only moves ~1e-6, so the frozen
    Jacobian costs a negligible contraction factor while the residual F is
    always exact). Keeps the working set fixed; backs off if an inactive
    constraint would be violated or a multiplier would go negative.
    """
    idx = np.flatnonzero(W)
    na = idx.size
    nz, m_eq = problem.nz, problem.m_eq
    G = problem.G
    best = (z, lam, mu)
    lu_piv = None
    for _ in range(steps):
        xs, us, _ = problem.unpack(z)
        try:
            c = problem.defects(xs, us)
            _, _, A_eq = problem.linearize(xs, us)
        except GuardViolation:
            return best
        stat = problem.cost_grad(z) + A_eq.T @ lam.ravel() + G.T @ mu
        h_act = G[idx] @ z - problem.h[idx]
        F = np.concatenate([stat, c.ravel(), h_act])
        if np.max(np.abs(F)) < 1e-13:
            break
        if lu_piv is None:
            try:
                H_L = problem.lagrangian_hessian(xs, us, lam)
            except GuardViolation:
                return best
            dim = nz + m_eq + na
            J = np.zeros((dim, dim))
            J[:nz, :nz] = H_L
            J[:nz, nz:nz + m_eq] = A_eq.T
            J[nz:nz + m_eq, :nz] = A_eq
            if na:
                J[:nz, nz + m_eq:] = G[idx].T
                J[nz + m_eq:, :nz] = G[idx]
            try:
                lu_piv = scipy.linalg.lu_factor(J)
            except (np.linalg.LinAlgError, ValueError):
                return best
        step = scipy.linalg.lu_solve(lu_piv, -F)
        z_new = z + step[:nz]
        lam_new = (lam.ravel() + step[nz:nz + m_eq]).reshape(lam.shape)
        mu_new = mu.copy()
        mu_new[idx] += step[nz + m_eq:]
        inactive = ~W
        if np.any(G[inactive] @ z_new - problem.h[inactive] > 1e-10) or \
                np.any(mu_new[idx] < -1e-9):
            return best
        z, lam, mu = z_new, lam_new, mu_new
        best = (z, lam, mu)
    return best


def solve(spec: OcpSpec, params: MpcParams, x0, model,
          warm_start: KktPoint | None = None) -> KktPoint:
    """Solve the OCP to a KKT-certified point.

    Raises SolverError when the iteration limit is exceeded (the error
    carries the last residuals) and propagates GuardViolation when the
    predicted trajectory crosses the Frenet singularity.
    """
    problem = OcpProblem(spec, params, x0, model)
    xs, us, ss, W = _initial_iterate(problem, warm_start)
    z = problem.pack(xs, us, ss)
    H = np.diag(problem.cost_hdiag)
    lam = np.zeros((problem.N, problem.nx))
    mu = np.zeros(problem.m_in)
    nu_pen = 1.0
    residuals = (np.inf, np.inf, np.inf)
    residuals_fresh = False
    iterations = 0

    for it in range(1, spec.max_iter + 1):
        iterations = it
        xs, us, _ = problem.unpack(z)
        c = problem.defects(xs, us)
        _, _, A_eq = problem.linearize(xs, us)
        if it > 1:
            residuals = problem.residual_norms(z, lam, mu, A_eq=A_eq, c=c)
            residuals_fresh = True
            if max(residuals) <= spec.tol:
                break
        g = problem.cost_grad(z)
        h_shift = problem.h - problem.G @ z
        p, lam_flat, mu, W = solve_qp(problem, H, g, A_eq, -c.ravel(), h_shift, W)
        lam = lam_flat.reshape(problem.N, problem.nx)

        # the merit only penalizes equality defects, so only the dynamics
        # multipliers bound the required penalty weight
        nu_pen = max(nu_pen, 1.5 * float(np.max(np.abs(lam_flat))), 1.0)
        phi0 = problem.cost(z) + nu_pen * float(np.sum(np.abs(c)))
        deriv = float(g @ p) - nu_pen * float(np.sum(np.abs(c)))
        if deriv > -1e-10 * max(1.0, abs(phi0)):
            # the merit is flat to rounding: take the plain SQP step and let
            # the residual check (plus polish) finish the job
            alpha, accepted = 1.0, True
        else:
            alpha, accepted = 1.0, False
            noise = 1e-12 * max(1.0, abs(phi0))
            for _ in range(13):
                trial = z + alpha * p
                if _merit(problem, trial, nu_pen) <= phi0 + 0.1 * alpha * deriv + noise:
                    accepted = True
                    break
                alpha *= 0.5
        if not accepted:
            break  # stalled at the merit's numerical floor; polish decides
        z = z + alpha * p
        residuals_fresh = False
        if np.max(np.abs(alpha * p)) < 1e-14:
            break

    if spec.polish and iterations >= 1:
        z_new, lam, mu = _polish(problem, z, lam, mu, W)
        if z_new is not z:
            z = z_new
            residuals_fresh = False
    if not residuals_fresh:
        residuals = problem.residual_norms(z, lam, mu)
    if max(residuals) > spec.tol:
        raise SolverError(
            f"SQP did not converge in {iterations} iterations "
            f"(residuals {residuals})", residuals, iterations)

    xs, us, ss = problem.unpack(z)
    hval = problem.G @ z - problem.h
    active = np.abs(hval) <= ACTIVE_TOL
    margin = float(np.min(mu[active])) if np.any(active) else np.inf
    return KktPoint(
        x=xs, u=us, slack=ss, lam=lam, mu=mu,
        active_set=active, working_set=W,
        kkt_residual=float(max(residuals)), residuals=residuals,
        iterations=iterations, cost=problem.cost(z),
        strict_comp_margin=margin, slack_max=float(np.max(ss)),
    )


def kkt_residuals(point: KktPoint, spec: OcpSpec, params: MpcParams, x0,
                  model):
    """Recompute (stationarity, feasibility, complementarity) from scratch."""
    problem = OcpProblem(spec, params, x0, model)
    z = problem.pack(point.x, point.u, point.slack)
    return problem.residual_norms(z, point.lam, point.mu)


def shift_warm_start(point: KktPoint, model, x0_new) -> KktPoint:
    """Receding-horizon warm start: drop stage 0, duplicate the last stage."""
    x = np.vstack([point.x[1:], model.step(point.x[-1], point.u[-1])])
    x[0] = np.asarray(x0_new, dtype=float)
    u = np.vstack([point.u[1:], point.u[-1:]])
    slack = np.concatenate([point.slack[1:], point.slack[-1:]])
    return replace(point, x=x, u=u, slack=slack)


def export_trajectory_csv(point: KktPoint, path, augmented: bool) -> None:
    """Debug CSV `k,beta,psi_dot,sigma,d,phi[,delta],u` of a solved OCP."""
    cols = ["k", "beta", "psi_dot", "sigma", "d", "phi"]
    if augmented:
        cols.append("delta")
    cols.append("u")
    lines = [",".join(cols)]
    n = point.u.shape[0]
    for k in range(n + 1):
        vals = [str(k)] + [f"{v:.9f}" for v in point.x[k]]
        vals.append(f"{point.u[k, 0]:.9f}" if k < n else "")
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")
