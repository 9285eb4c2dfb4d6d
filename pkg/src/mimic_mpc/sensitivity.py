"""Differentiating the controller's solution map at a KKT point.

The KKT conditions of the OCP, restricted to the equalities plus the active
inequalities, form an implicit function F(zeta, theta) = 0 in the
primal-dual vector zeta = (z, lambda, mu_act). Under LICQ and strict
complementarity, the implicit function theorem yields transposed-Jacobian
products of the solution map at the cost of one factorized linear solve:

    (d pi / d theta)^T zbar = -(dF/dtheta)^T (dF/dzeta)^{-T} zbar

and likewise with dF/dx0 for sensitivities to the initial state. The KKT
matrix is factorized once per request with a fixed pivot order, so repeated
seeds on the same point are cheap and the results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.sparse.linalg import splu

from .errors import NondifferentiableKktError, RankDeficiencyError
from .mpc import ACTIVE_TOL, KktPoint, MpcParams, OcpProblem, OcpSpec

WEAK_COMPLEMENTARITY_MARGIN = 1.0e-8

WRT_PARAMS = "wrt_params"
WRT_INITIAL_STATE = "wrt_initial_state"


@dataclass
class AdjointRequest:
    """One transposed-Jacobian-times-vector product to evaluate.

    The seed is a cotangent on the solution components: ``seed_u`` on the
    control trajectory (N, nu) and/or ``seed_x`` on the predicted states
    (N+1, nx); row 0 of ``seed_x`` is ignored since x0 is data.
    """

    kkt_point: KktPoint
    which: str = WRT_PARAMS
    seed_u: np.ndarray | None = None
    seed_x: np.ndarray | None = None

    def __post_init__(self):
        if self.which not in (WRT_PARAMS, WRT_INITIAL_STATE):
            raise ValueError(f"unknown derivative selector {self.which!r}")
        if self.seed_u is None and self.seed_x is None:
            raise ValueError("request needs a seed on u and/or x")


def seed_on_u0(point: KktPoint, value: float = 1.0) -> np.ndarray:
    seed = np.zeros_like(point.u)
    seed[0, 0] = value
    return seed


@dataclass
class KktSystemCore:
    """Factorized reduced KKT system plus the mixed-derivative blocks."""

    matrix: scipy.sparse.csc_matrix
    lu: object
    residual: np.ndarray
    active_rows: np.ndarray        # inequality row indices kept in the system
    dF_dtheta: np.ndarray          # (dim, n_theta)
    dF_dx0: np.ndarray             # (dim, nx)
    problem: OcpProblem
    strict_margin: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def solve_transposed(self, rhs: np.ndarray) -> np.ndarray:
        return self.lu.solve(rhs, trans="T")


def _active_rows(problem: OcpProblem, point: KktPoint) -> np.ndarray:
    z = problem.pack(point.x, point.u, point.slack)
    hval = problem.G @ z - problem.h
    return np.flatnonzero(np.abs(hval) <= ACTIVE_TOL)


def kkt_system(point: KktPoint, spec: OcpSpec, params: MpcParams, x0, model,
               allow_weak: bool = False) -> KktSystemCore:
    """Assemble and factorize dF/dzeta on the active set.

    Raises RankDeficiencyError when LICQ fails and
    NondifferentiableKktError when strict complementarity is violated
    (unless ``allow_weak``, in which case the one-sided derivative that
    keeps the constraint active is produced and the caller sees the margin).
    """
    problem = OcpProblem(spec, params, x0, model)
    z = problem.pack(point.x, point.u, point.slack)
    xs, us, _ = problem.unpack(z)
    act = _active_rows(problem, point)
    margin = float(np.min(point.mu[act])) if act.size else np.inf
    if margin < WEAK_COMPLEMENTARITY_MARGIN and not allow_weak:
        raise NondifferentiableKktError(margin)

    As, Bs, A_eq = problem.linearize(xs, us)
    G_act = problem.G[act]
    nz, m_eq, m_act = problem.nz, problem.m_eq, act.size

    # LICQ: the active constraint Jacobian must keep full row rank
    constr = np.vstack([A_eq, G_act])
    r_fact = scipy.linalg.qr(constr.T, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(r_fact))
    rank_tol = diag[0] * max(constr.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > rank_tol))
    if rank < constr.shape[0]:
        raise RankDeficiencyError(
            f"active constraint Jacobian rank {rank} < {constr.shape[0]} rows")

    H_L = problem.lagrangian_hessian(xs, us, point.lam)

    dim = nz + m_eq + m_act
    K = np.zeros((dim, dim))
    K[:nz, :nz] = H_L
    K[:nz, nz:nz + m_eq] = A_eq.T
    K[nz:nz + m_eq, :nz] = A_eq
    K[:nz, nz + m_eq:] = G_act.T
    K[nz + m_eq:, :nz] = G_act

    mu_full = np.zeros(problem.m_in)
    mu_full[act] = point.mu[act]
    stat = problem.cost_grad(z) + A_eq.T @ point.lam.ravel() + problem.G.T @ mu_full
    h_act = G_act @ z - problem.h[act]
    c = problem.defects(xs, us)
    residual = np.concatenate([stat, c.ravel(), h_act])

    dF_dtheta = np.zeros((dim, params.variant.theta_dim))
    dF_dtheta[:nz] = problem.cost_grad_dtheta(z)

    nx, nu = problem.nx, problem.nu
    dF_dx0 = np.zeros((dim, nx))
    M0 = model.hessian_contract(xs[0], us[0], point.lam[0])
    iu0 = problem.u_index(0)
    dF_dx0[iu0:iu0 + nu, :] = -M0[nx:, :nx]  # d/dx0 of -B0' lam0
    dF_dx0[nz:nz + nx, :] = -As[0]           # defect row c0 = x1 - f(x0, u0)

    sparse = scipy.sparse.csc_matrix(K)
    try:
        lu = splu(sparse, permc_spec="NATURAL")
    except RuntimeError as exc:
        raise RankDeficiencyError(f"KKT matrix factorization failed: {exc}") from exc

    return KktSystemCore(matrix=sparse, lu=lu, residual=residual,
                         active_rows=act, dF_dtheta=dF_dtheta, dF_dx0=dF_dx0,
                         problem=problem, strict_margin=margin)


def _embed_seed(core: KktSystemCore, seed_u, seed_x) -> np.ndarray:
    problem = core.problem
    zbar = np.zeros(core.dim)
    if seed_u is not None:
        seed_u = np.asarray(seed_u, dtype=float)
        for k in range(problem.N):
            iu = problem.u_index(k)
            zbar[iu:iu + problem.nu] += seed_u[k]
    if seed_x is not None:
        seed_x = np.asarray(seed_x, dtype=float)
        for k in range(1, problem.N + 1):
            ix = problem.x_index(k)
            zbar[ix:ix + problem.nx] += seed_x[k]
    return zbar


def adjoint_solve(core: KktSystemCore, seed_u=None, seed_x=None,
                  which: str = WRT_PARAMS) -> np.ndarray:
    """One adjoint product on an assembled system: -(dF/dp)^T (dF/dz)^{-T} zbar."""
    zbar = _embed_seed(core, seed_u, seed_x)
    y = core.solve_transposed(zbar)
    mixed = core.dF_dtheta if which == WRT_PARAMS else core.dF_dx0
    return -(mixed.T @ y)


def adjoint_wrt_params(request: AdjointRequest, spec: OcpSpec,
                       params: MpcParams, x0, model,
                       allow_weak: bool = False) -> np.ndarray:
    """(d pi/d theta)^T zbar for the given seed; shape (theta_dim,)."""
    core = kkt_system(request.kkt_point, spec, params, x0, model,
                      allow_weak=allow_weak)
    return adjoint_solve(core, request.seed_u, request.seed_x, WRT_PARAMS)


def adjoint_wrt_initial_state(request: AdjointRequest, spec: OcpSpec,
                              params: MpcParams, x0, model,
                              allow_weak: bool = False) -> np.ndarray:
    """(d pi/d x0)^T zbar for the given seed; shape (nx,)."""
    core = kkt_system(request.kkt_point, spec, params, x0, model,
                      allow_weak=allow_weak)
    return adjoint_solve(core, request.seed_u, request.seed_x, WRT_INITIAL_STATE)
