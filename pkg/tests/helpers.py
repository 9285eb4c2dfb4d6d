"""Independent numerical oracles shared by the test suite.

These implementations deliberately avoid the code paths they check:
the Riccati recursion validates the SQP solver, and the finite-difference
helpers validate adjoint sensitivities and BPTT gradients.
"""

import numpy as np

from mimic_mpc.dynamics import LinearModel
from mimic_mpc.mpc import MpcParams, OcpSpec, Variant, solve


def riccati_tracking_u0(A, B, c, Q, qvec, R, x0, horizon):
    """u_0 of the unconstrained affine-LQ problem via backward recursion.

    Cost: sum_{k=0}^{N-1} 1/2 x_k'Qx_k + q'x_k + 1/2 u_k'Ru_k, no terminal
    term, dynamics x_{k+1} = A x_k + B u_k + c.
    """
    nx = A.shape[0]
    P = np.zeros((nx, nx))
    p = np.zeros(nx)
    K = kff = None
    for _ in range(horizon):
        q_uu = R + B.T @ P @ B
        q_xu = A.T @ P @ B
        q_x = qvec + A.T @ (p + P @ c)
        q_u = B.T @ (p + P @ c)
        K = np.linalg.solve(q_uu, q_xu.T)
        kff = np.linalg.solve(q_uu, q_u)
        P = Q + A.T @ P @ A - q_xu @ K
        p = q_x - q_xu @ kff
        P = 0.5 * (P + P.T)
    u0 = -K @ x0 - kff
    return float(u0[0]), K


def riccati_feedback_gain(A, B, Q, R, horizon):
    """First-stage feedback gain K_0 (u_0 = -K_0 x_0 for the homogeneous LQR)."""
    _, K = riccati_tracking_u0(A, B, np.zeros(A.shape[0]), Q,
                               np.zeros(A.shape[0]), R, np.zeros(A.shape[0]),
                               horizon)
    return K


def random_lq_instance(rng, horizon=8):
    """A stable random linear-quadratic tracking instance in solver form."""
    nx = 5
    A = np.eye(nx) + 0.08 * rng.standard_normal((nx, nx))
    # tame the spectral radius so N-step predictions stay well scaled
    rho = max(np.abs(np.linalg.eigvals(A)))
    if rho > 1.0:
        A /= (rho * 1.02)
    B = rng.standard_normal((nx, 1)) * 0.5
    c = 0.01 * rng.standard_normal(nx)
    theta = np.concatenate([rng.uniform(-1.0, 1.0, size=3),
                            rng.uniform(-0.5, 0.5, size=1)])
    x0 = rng.uniform(-0.5, 0.5, size=nx)
    params = MpcParams(Variant.WEIGHTS, theta)
    spec = OcpSpec(variant=Variant.WEIGHTS, horizon=horizon,
                   lane_half_width=1e6, delta_max=1e6, beta_max=1e6,
                   psi_dot_max=1e6)
    model = LinearModel(A, B, c)
    return spec, params, model, x0, (A, B, c)


def solve_lq_both_ways(rng, horizon=8):
    """Solve one random LQ instance with the SQP solver and the oracle."""
    spec, params, model, x0, (A, B, c) = random_lq_instance(rng, horizon)
    point = solve(spec, params, x0, model)
    w_d, w_phi, w_u, dbar, _ = params.coefficients()
    Q = np.diag([0.0, 0.0, 0.0, 2.0 * w_d, 2.0 * w_phi])
    qvec = np.array([0.0, 0.0, 0.0, -2.0 * w_d * dbar, 0.0])
    R = np.array([[2.0 * w_u]])
    u0_oracle, _ = riccati_tracking_u0(A, B, c, Q, qvec, R, x0, horizon)
    return point, u0_oracle
