"""Frenet-frame bicycle vehicle model, RK4 discretization and track geometry.

The same model backs the closed-loop simulator (the "plant") and the
predictive controller's internal model, so simulator and model match
exactly unless a perturbed plant is requested.

State ordering used throughout the package:

    x = (beta, psi_dot, sigma, d, phi)            plain, nx = 5
    x = (beta, psi_dot, sigma, d, phi, delta)     augmented, nx = 6

In the plain model the control is the steering angle delta; in the
augmented model delta is a state and the control is the steering rate.

All numeric cores accept complex inputs so that higher derivatives can be
obtained by complex-step differentiation of the analytic Jacobians.
"""

from __future__ import annotations

import cmath
import functools
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import GuardViolation, TrackSpecError

GUARD_MIN_DENOM = 0.5

# Indices into the state vector.
IX_BETA, IX_PSI_DOT, IX_SIGMA, IX_D, IX_PHI, IX_DELTA = range(6)

MODE_DELTA = "delta"
MODE_DELTA_RATE = "delta_rate"


@dataclass(frozen=True)
class VehicleParams:
    """Single-track model parameters; all strictly positive."""

    mass: float = 1380.0          # kg
    inertia_z: float = 2420.0     # kg m^2
    l_f: float = 1.0              # m, CoG to front axle
    l_r: float = 1.6              # m, CoG to rear axle
    c_f: float = 1.0e5            # N/rad, front cornering stiffness
    c_r: float = 1.0e5            # N/rad, rear cornering stiffness
    v_x: float = 13.889           # m/s, fixed longitudinal speed (50 km/h)
    steering_ratio: float = 16.0  # hand-wheel angle per road-wheel angle

    def __post_init__(self):
        for name in ("mass", "inertia_z", "l_f", "l_r", "c_f", "c_r", "v_x",
                     "steering_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"VehicleParams.{name} must be positive")

    def perturbed(self, factor: float = 1.10) -> "VehicleParams":
        """Plant-mismatch variant: mass and cornering stiffnesses scaled."""
        return replace(self, mass=self.mass * factor,
                       c_f=self.c_f * factor, c_r=self.c_r * factor)

    def lateral_coefficients(self):
        """Coefficients of the linear single-track dynamics.

        Returns (a11, a12, a21, a22, b1, b2) such that

            beta_dot   = a11*beta + a12*psi_dot + b1*delta
            psi_ddot   = a21*beta + a22*psi_dot + b2*delta
        """
        m, iz, vx = self.mass, self.inertia_z, self.v_x
        cf, cr, lf, lr = self.c_f, self.c_r, self.l_f, self.l_r
        a11 = -(cf + cr) / (m * vx)
        a12 = (cr * lr - cf * lf) / (m * vx * vx) - 1.0
        a21 = (cr * lr - cf * lf) / iz
        a22 = -(cf * lf * lf + cr * lr * lr) / (iz * vx)
        b1 = cf / (m * vx)
        b2 = cf * lf / iz
        return a11, a12, a21, a22, b1, b2


@dataclass(frozen=True)
class VehicleState:
    """Frenet-frame vehicle state; ``delta`` present only when augmented."""

    beta: float = 0.0
    psi_dot: float = 0.0
    sigma: float = 0.0
    d: float = 0.0
    phi: float = 0.0
    delta: float | None = None

    @property
    def augmented(self) -> bool:
        return self.delta is not None

    def as_array(self) -> np.ndarray:
        vals = [self.beta, self.psi_dot, self.sigma, self.d, self.phi]
        if self.delta is not None:
            vals.append(self.delta)
        return np.asarray(vals, dtype=float)

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        arr = np.asarray(arr, dtype=float)
        if arr.shape[0] == 5:
            return cls(*arr.tolist())
        if arr.shape[0] == 6:
            return cls(*arr.tolist())
        raise ValueError(f"expected 5 or 6 state entries, got {arr.shape[0]}")


@dataclass(frozen=True)
class ControlInput:
    """Steering command: angle (rad) or rate (rad/s) depending on mode."""

    value: float
    mode: str = MODE_DELTA

    def __post_init__(self):
        if self.mode not in (MODE_DELTA, MODE_DELTA_RATE):
            raise ValueError(f"unknown control mode {self.mode!r}")


class Track:
    """Closed-loop centerline: uniformly sampled curvature plus lane width.

    Curvature is interpolated piecewise-linearly between samples and is
    periodic in arclength. The interpolation accepts complex sigma (bin
    selection uses the real part) so model derivatives can be
    complex-stepped.
    """

    def __init__(self, kappa_samples, delta_sigma: float, width: float,
                 closed: bool = True):
        samples = np.asarray(kappa_samples, dtype=float)
        if samples.ndim != 1 or samples.size < 2:
            raise TrackSpecError("need at least 2 curvature samples")
        if delta_sigma <= 0 or width <= 0:
            raise TrackSpecError("delta_sigma and width must be positive")
        self.kappa_samples = samples
        self._sample_list = samples.tolist()  # python floats: fast scalar math
        self.delta_sigma = float(delta_sigma)
        self.width = float(width)
        self.closed = bool(closed)
        self.length = samples.size * self.delta_sigma

    def wrap(self, sigma):
        return sigma - self.length * math.floor(sigma.real / self.length)

    def _locate(self, sigma):
        s = sigma - self.length * math.floor(sigma.real / self.length)
        pos = s / self.delta_sigma
        idx = min(int(math.floor(pos.real)), self.kappa_samples.size - 1)
        frac = pos - idx
        nxt = (idx + 1) % self.kappa_samples.size
        return idx, nxt, frac

    def kappa(self, sigma):
        idx, nxt, frac = self._locate(sigma)
        k0 = self._sample_list[idx]
        k1 = self._sample_list[nxt]
        return k0 + (k1 - k0) * frac

    def kappa_slope(self, sigma):
        """Piecewise-constant derivative of the interpolated curvature."""
        idx, nxt, _ = self._locate(sigma)
        return (self._sample_list[nxt] - self._sample_list[idx]) / self.delta_sigma

    def kappa_and_slope(self, sigma):
        idx, nxt, frac = self._locate(sigma)
        k0 = self._sample_list[idx]
        k1 = self._sample_list[nxt]
        return k0 + (k1 - k0) * frac, (k1 - k0) / self.delta_sigma

    def __eq__(self, other):
        return (isinstance(other, Track)
                and self.delta_sigma == other.delta_sigma
                and self.width == other.width
                and self.closed == other.closed
                and np.array_equal(self.kappa_samples, other.kappa_samples))

    def __repr__(self):
        return (f"Track(length={self.length:.1f} m, width={self.width:.2f} m, "
                f"samples={self.kappa_samples.size})")


def curvature(track: Track, sigma: float) -> float:
    """Interpolated curvature at arclength sigma (periodic)."""
    return float(track.kappa(sigma))


# ---------------------------------------------------------------------------
# Track construction and file formats
# ---------------------------------------------------------------------------

DEFAULT_LANE_WIDTH = 3.5
DEFAULT_DELTA_SIGMA = 1.0
RAMP_LENGTH = 10.0  # m, linear curvature blend at segment junctions


def default_track_segments() -> list[tuple[float, float]]:
    """Seven curves with distinct lengths/curvatures, 1200 m total."""
    return [
        (90.0, 0.0),
        (90.0, 1.0 / 80.0),
        (70.0, 0.0),
        (70.0, -1.0 / 60.0),
        (60.0, 0.0),
        (100.0, 1.0 / 100.0),
        (50.0, 0.0),
        (80.0, -1.0 / 70.0),
        (70.0, 0.0),
        (120.0, 1.0 / 120.0),
        (60.0, 0.0),
        (90.0, -1.0 / 90.0),
        (50.0, 0.0),
        (110.0, 1.0 / 150.0),
        (90.0, 0.0),
    ]


def build_track(segments, width: float = DEFAULT_LANE_WIDTH,
                delta_sigma: float = DEFAULT_DELTA_SIGMA,
                expected_length: float | None = None) -> Track:
    """Sample a segment list into a Track.

    Each segment is (length_m, curvature_per_m); curvature blends linearly
    over RAMP_LENGTH meters centered on every junction, including the
    wrap-around junction at sigma = 0.
    """
    segments = [(float(l), float(k)) for l, k in segments]
    if not segments:
        raise TrackSpecError("empty segment list")
    for i, (length, _) in enumerate(segments):
        if length < RAMP_LENGTH:
            raise TrackSpecError(
                f"segment {i} shorter than the {RAMP_LENGTH:.0f} m junction ramp")
    total = sum(l for l, _ in segments)
    if expected_length is not None and abs(total - expected_length) > 1e-9:
        raise TrackSpecError(
            f"segments sum to {total:.3f} m, declared length {expected_length:.3f} m")

    bounds = np.concatenate([[0.0], np.cumsum([l for l, _ in segments])])
    values = np.array([k for _, k in segments])
    n = int(round(total / delta_sigma))
    half = RAMP_LENGTH / 2.0

    def base_value(s: float) -> float:
        i = int(np.searchsorted(bounds, s, side="right")) - 1
        return values[min(max(i, 0), len(segments) - 1)]

    sigmas = np.arange(n) * delta_sigma
    samples = np.array([base_value(s) for s in sigmas])

    # Junctions sit at every internal boundary plus the wrap at 0 == total.
    junctions = list(bounds[1:-1]) + [0.0]
    for b in junctions:
        k_prev = base_value((b - half) % total)
        k_next = base_value((b + half) % total)
        if k_prev == k_next:
            continue
        rel = (sigmas - b + total / 2.0) % total - total / 2.0
        in_ramp = np.abs(rel) <= half
        samples[in_ramp] = k_prev + (rel[in_ramp] + half) / RAMP_LENGTH * (k_next - k_prev)

    return Track(samples, delta_sigma, width)


def build_default_track(width: float = DEFAULT_LANE_WIDTH) -> Track:
    return build_track(default_track_segments(), width=width,
                       expected_length=1200.0)


def save_track(track: Track, csv_path) -> None:
    """Write `sigma_m,kappa_per_m` CSV plus a JSON sidecar."""
    csv_path = Path(csv_path)
    sigmas = np.arange(track.kappa_samples.size) * track.delta_sigma
    lines = ["sigma_m,kappa_per_m"]
    lines += [f"{s:.6f},{k:.9f}" for s, k in zip(sigmas, track.kappa_samples)]
    csv_path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "length_m": track.length,
        "width_m": track.width,
        "delta_sigma_m": track.delta_sigma,
    }
    csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_track(csv_path) -> Track:
    csv_path = Path(csv_path)
    sidecar = json.loads(csv_path.with_suffix(".json").read_text())
    rows = csv_path.read_text().strip().splitlines()
    if rows[0].strip() != "sigma_m,kappa_per_m":
        raise TrackSpecError(f"unexpected track CSV header: {rows[0]!r}")
    kappas = np.array([float(r.split(",")[1]) for r in rows[1:]])
    track = Track(kappas, sidecar["delta_sigma_m"], sidecar["width_m"])
    if abs(track.length - sidecar["length_m"]) > 1e-6:
        raise TrackSpecError("sidecar length disagrees with sample count")
    return track


def load_track_spec(json_path) -> list[tuple[float, float]]:
    """Segment list file: JSON array of {length_m, curvature_per_m}."""
    data = json.loads(Path(json_path).read_text())
    if not isinstance(data, list) or not data:
        raise TrackSpecError("track spec must be a non-empty JSON list")
    segments = []
    for i, item in enumerate(data):
        try:
            segments.append((float(item["length_m"]), float(item["curvature_per_m"])))
        except (KeyError, TypeError) as exc:
            raise TrackSpecError(f"segment {i}: missing field {exc}") from exc
    return segments


# ---------------------------------------------------------------------------
# Continuous dynamics and analytic Jacobian (complex-safe)
# ---------------------------------------------------------------------------
# The cores work on python scalars (math/cmath) rather than numpy scalars:
# the state is tiny and these functions dominate the solver's runtime.

@functools.lru_cache(maxsize=None)
def _coef(params: VehicleParams):
    return params.lateral_coefficients()


def _scalars(x, u):
    vals = [v for v in x] + [u[0]]
    if any(isinstance(v, complex) or getattr(v, "imag", 0.0) != 0.0
           for v in vals):
        return [complex(v) for v in vals], cmath
    return [float(v) for v in vals], math


def _xdot_scalars(xv, cm, track, params, augmented):
    """Derivative as a list of scalars; xv = [state..., control]."""
    beta, psi_dot, sigma, d, phi = xv[0], xv[1], xv[2], xv[3], xv[4]
    delta = xv[5] if augmented else xv[-1]
    vx = params.v_x
    kap = track.kappa(sigma)
    denom = 1.0 - kap * d
    if denom.real < GUARD_MIN_DENOM:
        raise GuardViolation(sigma.real, d.real)

    v_y = vx * cm.tan(beta)
    sin_p, cos_p = cm.sin(phi), cm.cos(phi)
    proj = vx * cos_p - v_y * sin_p
    sigma_dot = proj / denom
    d_dot = vx * sin_p + v_y * cos_p
    phi_dot = psi_dot - kap * sigma_dot

    a11, a12, a21, a22, b1, b2 = _coef(params)
    out = [a11 * beta + a12 * psi_dot + b1 * delta,
           a21 * beta + a22 * psi_dot + b2 * delta,
           sigma_dot, d_dot, phi_dot]
    if augmented:
        out.append(xv[-1])
    return out


def _xdot_and_jac_scalars(xv, cm, track, params, augmented):
    """Fused derivative and Jacobian rows (shares the trig evaluations)."""
    nx = 6 if augmented else 5
    beta, psi_dot, sigma, d, phi = xv[0], xv[1], xv[2], xv[3], xv[4]
    delta = xv[5] if augmented else xv[-1]
    vx = params.v_x
    kap, kap_s = track.kappa_and_slope(sigma)
    denom = 1.0 - kap * d
    if denom.real < GUARD_MIN_DENOM:
        raise GuardViolation(sigma.real, d.real)

    tan_b = cm.tan(beta)
    v_y = vx * tan_b
    dvy_dbeta = vx * (1.0 + tan_b * tan_b)
    sin_p, cos_p = cm.sin(phi), cm.cos(phi)
    proj = vx * cos_p - v_y * sin_p
    d_dot = vx * sin_p + v_y * cos_p
    sigma_dot = proj / denom
    inv_d2 = 1.0 / (denom * denom)

    dsig_dbeta = -sin_p * dvy_dbeta / denom
    dsig_dphi = -d_dot / denom
    dsig_dd = proj * kap * inv_d2
    dsig_dsigma = proj * kap_s * d * inv_d2

    a11, a12, a21, a22, b1, b2 = _coef(params)
    xdot = [a11 * beta + a12 * psi_dot + b1 * delta,
            a21 * beta + a22 * psi_dot + b2 * delta,
            sigma_dot, d_dot, psi_dot - kap * sigma_dot]
    zero = 0.0 * beta  # stays complex when inputs are complex
    rows = [
        [a11, a12, zero, zero, zero],
        [a21, a22, zero, zero, zero],
        [dsig_dbeta, zero, dsig_dsigma, dsig_dd, dsig_dphi],
        [cos_p * dvy_dbeta, zero, zero, zero, proj],
        [-kap * dsig_dbeta, 1.0 + zero, -kap_s * sigma_dot - kap * dsig_dsigma,
         -kap * dsig_dd, -kap * dsig_dphi],
    ]
    if augmented:
        xdot.append(xv[-1])
        for row, bcoef in zip(rows, (b1, b2, zero, zero, zero)):
            row.append(bcoef)   # d/d(delta state)
            row.append(zero)    # d/d(rate control)
        rows.append([zero] * nx + [1.0 + zero])
    else:
        for row, bcoef in zip(rows, (b1, b2, zero, zero, zero)):
            row.append(bcoef)   # d/d(delta control)
    return xdot, rows


def _xdot(x, u, track: Track, params: VehicleParams, augmented: bool):
    """Continuous state derivative; raises GuardViolation at the singularity."""
    xv, cm = _scalars(x, u)
    out = _xdot_scalars(xv, cm, track, params, augmented)
    return np.asarray(out, dtype=complex if cm is cmath else float)


def _xdot_jacobian(x, u, track: Track, params: VehicleParams, augmented: bool):
    """Analytic Jacobian of _xdot w.r.t. (x, u), shape (nx, nx + 1)."""
    xv, cm = _scalars(x, u)
    _, rows = _xdot_and_jac_scalars(xv, cm, track, params, augmented)
    return np.asarray(rows, dtype=complex if cm is cmath else float)


# ---------------------------------------------------------------------------
# Batched evaluation (vectorized over independent stages or directions)
# ---------------------------------------------------------------------------

def _kappa_batch(track: Track, sigma):
    """Vectorized curvature and slope lookup; complex-safe via real parts."""
    samples = track.kappa_samples
    n = samples.size
    length, ds = track.length, track.delta_sigma
    s = sigma - length * np.floor(np.real(sigma) / length)
    pos = s / ds
    idx = np.minimum(np.floor(np.real(pos)).astype(int), n - 1)
    frac = pos - idx
    nxt = (idx + 1) % n
    k0, k1 = samples[idx], samples[nxt]
    return k0 + (k1 - k0) * frac, (k1 - k0) / ds


def _xdot_and_jac_batch(X, U, track: Track, params: VehicleParams,
                        augmented: bool):
    """Fused derivative and Jacobian for a batch: X (B,nx), U (B,nu).

    Returns (Xdot (B,nx), J (B,nx,nx+nu)). Raises GuardViolation if any
    batch element crosses the singularity.
    """
    B = X.shape[0]
    nx = 6 if augmented else 5
    dtype = np.result_type(X, U)
    beta, psi_dot, sigma, d, phi = (X[:, i] for i in range(5))
    delta = X[:, 5] if augmented else U[:, 0]
    vx = params.v_x
    kap, kap_s = _kappa_batch(track, sigma)
    denom = 1.0 - kap * d
    if np.min(np.real(denom)) < GUARD_MIN_DENOM:
        bad = int(np.argmin(np.real(denom)))
        raise GuardViolation(np.real(sigma[bad]), np.real(d[bad]))

    tan_b = np.tan(beta)
    v_y = vx * tan_b
    dvy_dbeta = vx * (1.0 + tan_b * tan_b)
    sin_p, cos_p = np.sin(phi), np.cos(phi)
    proj = vx * cos_p - v_y * sin_p
    d_dot = vx * sin_p + v_y * cos_p
    sigma_dot = proj / denom
    inv_d2 = 1.0 / (denom * denom)

    dsig_dbeta = -sin_p * dvy_dbeta / denom
    dsig_dphi = -d_dot / denom
    dsig_dd = proj * kap * inv_d2
    dsig_dsigma = proj * kap_s * d * inv_d2

    a11, a12, a21, a22, b1, b2 = _coef(params)
    Xdot = np.empty((B, nx), dtype=dtype)
    Xdot[:, IX_BETA] = a11 * beta + a12 * psi_dot + b1 * delta
    Xdot[:, IX_PSI_DOT] = a21 * beta + a22 * psi_dot + b2 * delta
    Xdot[:, IX_SIGMA] = sigma_dot
    Xdot[:, IX_D] = d_dot
    Xdot[:, IX_PHI] = psi_dot - kap * sigma_dot
    if augmented:
        Xdot[:, IX_DELTA] = U[:, 0]

    J = np.zeros((B, nx, nx + 1), dtype=dtype)
    delta_col = IX_DELTA if augmented else nx
    J[:, IX_BETA, IX_BETA] = a11
    J[:, IX_BETA, IX_PSI_DOT] = a12
    J[:, IX_BETA, delta_col] = b1
    J[:, IX_PSI_DOT, IX_BETA] = a21
    J[:, IX_PSI_DOT, IX_PSI_DOT] = a22
    J[:, IX_PSI_DOT, delta_col] = b2
    J[:, IX_SIGMA, IX_BETA] = dsig_dbeta
    J[:, IX_SIGMA, IX_SIGMA] = dsig_dsigma
    J[:, IX_SIGMA, IX_D] = dsig_dd
    J[:, IX_SIGMA, IX_PHI] = dsig_dphi
    J[:, IX_D, IX_BETA] = cos_p * dvy_dbeta
    J[:, IX_D, IX_PHI] = proj
    J[:, IX_PHI, IX_PSI_DOT] = 1.0
    J[:, IX_PHI, IX_BETA] = -kap * dsig_dbeta
    J[:, IX_PHI, IX_SIGMA] = -kap_s * sigma_dot - kap * dsig_dsigma
    J[:, IX_PHI, IX_D] = -kap * dsig_dd
    J[:, IX_PHI, IX_PHI] = -kap * dsig_dphi
    if augmented:
        J[:, IX_DELTA, nx] = 1.0
    return Xdot, J


def _rk4_batch(X, U, track, params, dt, augmented, with_jacobians: bool):
    """Batched RK4 step and (optionally) its exact chained Jacobians."""
    B = X.shape[0]
    nx = X.shape[1]
    dtype = np.result_type(X, U)
    eye = np.eye(nx, dtype=dtype)

    def fj(Xs):
        return _xdot_and_jac_batch(Xs, U, track, params, augmented)

    k1, J1 = fj(X)
    x2 = X + 0.5 * dt * k1
    k2, J2 = fj(x2)
    x3 = X + 0.5 * dt * k2
    k3, J3 = fj(x3)
    x4 = X + dt * k3
    k4, J4 = fj(x4)
    Xnext = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not with_jacobians:
        return Xnext, None, None

    J1x, J1u = J1[:, :, :nx], J1[:, :, nx:]
    J2x, J2u = J2[:, :, :nx], J2[:, :, nx:]
    J3x, J3u = J3[:, :, :nx], J3[:, :, nx:]
    J4x, J4u = J4[:, :, :nx], J4[:, :, nx:]
    dk2x = J2x @ (eye + 0.5 * dt * J1x)
    dk2u = J2x @ (0.5 * dt * J1u) + J2u
    dk3x = J3x @ (eye + 0.5 * dt * dk2x)
    dk3u = J3x @ (0.5 * dt * dk2u) + J3u
    dk4x = J4x @ (eye + dt * dk3x)
    dk4u = J4x @ (dt * dk3u) + J4u
    A = eye + (dt / 6.0) * (J1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    Bm = (dt / 6.0) * (J1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return Xnext, A, Bm


def rk4(f, x, dt: float):
    """One classical Runge-Kutta-4 step of x' = f(x)."""
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_step(x, u, track, params, dt, augmented):
    xv, cm = _scalars(x, u)
    uv = xv[-1:]
    s = xv[:-1]
    n = len(s)

    def f(vals):
        return _xdot_scalars(vals + uv, cm, track, params, augmented)

    k1 = f(s)
    k2 = f([s[i] + 0.5 * dt * k1[i] for i in range(n)])
    k3 = f([s[i] + 0.5 * dt * k2[i] for i in range(n)])
    k4 = f([s[i] + dt * k3[i] for i in range(n)])
    out = [s[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
           for i in range(n)]
    return np.asarray(out, dtype=complex if cm is cmath else float)


def _rk4_jacobians(x, u, track, params, dt, augmented):
    """Exact Jacobians (A, B) of the RK4 map, chained through its stages."""
    xv, cm = _scalars(x, u)
    uv = xv[-1:]
    s = xv[:-1]
    nx = len(s)
    dtype = complex if cm is cmath else float
    eye = np.eye(nx, dtype=dtype)

    def fj(vals):
        xdot, rows = _xdot_and_jac_scalars(vals + uv, cm, track, params,
                                           augmented)
        J = np.asarray(rows, dtype=dtype)
        return xdot, J[:, :nx], J[:, nx:nx + 1]

    k1, J1x, J1u = fj(s)
    x2 = [s[i] + 0.5 * dt * k1[i] for i in range(nx)]
    k2, J2x, J2u = fj(x2)
    dk2x = J2x @ (eye + 0.5 * dt * J1x)
    dk2u = J2x @ (0.5 * dt * J1u) + J2u

    x3 = [s[i] + 0.5 * dt * k2[i] for i in range(nx)]
    k3, J3x, J3u = fj(x3)
    dk3x = J3x @ (eye + 0.5 * dt * dk2x)
    dk3u = J3x @ (0.5 * dt * dk2u) + J3u

    x4 = [s[i] + dt * k3[i] for i in range(nx)]
    _, J4x, J4u = fj(x4)
    dk4x = J4x @ (eye + dt * dk3x)
    dk4u = J4x @ (dt * dk3u) + J4u

    A = eye + (dt / 6.0) * (J1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    B = (dt / 6.0) * (J1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return A, B


_CSTEP = 1e-100


@dataclass(frozen=True)
class BicycleModel:
    """RK4-discretized Frenet bicycle model.

    ``augmented=False``: 5 states, control = steering angle.
    ``augmented=True``: 6 states (incl. steering angle), control = rate.

    ``step`` leaves sigma unwrapped so multi-step predictions stay
    continuous; the plant-facing ``step_wrapped`` wraps it to [0, length).
    """

    track: Track
    params: VehicleParams
    dt: float = 0.1
    augmented: bool = False

    @property
    def nx(self) -> int:
        return 6 if self.augmented else 5

    @property
    def nu(self) -> int:
        return 1

    def xdot(self, x, u):
        return _xdot(x, u, self.track, self.params, self.augmented)

    def step(self, x, u):
        return _rk4_step(x, u, self.track, self.params, self.dt, self.augmented)

    def step_wrapped(self, x, u):
        nxt = self.step(x, u)
        nxt[IX_SIGMA] = self.track.wrap(nxt[IX_SIGMA])
        return nxt

    def jacobians(self, x, u):
        return _rk4_jacobians(x, u, self.track, self.params, self.dt,
                              self.augmented)

    def step_batch(self, X, U):
        Xn, _, _ = _rk4_batch(np.asarray(X), np.asarray(U), self.track,
                              self.params, self.dt, self.augmented, False)
        return Xn

    def jacobians_batch(self, X, U):
        """Stage Jacobians for B independent (x, u) pairs: (B,nx,nx), (B,nx,nu)."""
        _, A, B = _rk4_batch(np.asarray(X), np.asarray(U), self.track,
                             self.params, self.dt, self.augmented, True)
        return A, B

    def hessian_contract(self, x, u, lam):
        """d/d(x,u) of [A B]^T lam, i.e. the lam-contracted step Hessian.

        Obtained by complex-stepping the analytic RK4 Jacobian along all
        coordinate directions in one batched pass; exact to machine
        precision and free of subtractive cancellation.
        """
        n = self.nx + self.nu
        lam = np.asarray(lam, dtype=float)
        X = np.tile(np.asarray(x, dtype=complex), (n, 1))
        U = np.tile(np.asarray(u, dtype=complex), (n, 1))
        for j in range(self.nx):
            X[j, j] += 1j * _CSTEP
        for j in range(self.nu):
            U[self.nx + j, j] += 1j * _CSTEP
        A, B = self.jacobians_batch(X, U)
        # rows of M: gradient components (x then u); columns: directions
        JT_lam = np.concatenate([A.transpose(0, 2, 1) @ lam,
                                 B.transpose(0, 2, 1) @ lam], axis=1)
        M = np.imag(JT_lam).T / _CSTEP
        return 0.5 * (M + M.T)


class LinearModel:
    """Discrete linear test model x+ = A x + B u + c (zero curvature terms)."""

    def __init__(self, A, B, c=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.c = np.zeros(self.A.shape[0]) if c is None else np.asarray(c, dtype=float)
        self.nx = self.A.shape[0]
        self.nu = self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ u + self.c

    def step_wrapped(self, x, u):
        return self.step(x, u)

    def jacobians(self, x, u):
        return self.A.copy(), self.B.copy()

    def step_batch(self, X, U):
        return X @ self.A.T + U @ self.B.T + self.c

    def jacobians_batch(self, X, U):
        n = X.shape[0]
        return (np.broadcast_to(self.A, (n, self.nx, self.nx)).copy(),
                np.broadcast_to(self.B, (n, self.nx, self.nu)).copy())

    def hessian_contract(self, x, u, lam):
        n = self.nx + self.nu
        return np.zeros((n, n))


# ---------------------------------------------------------------------------
# Domain-level operations
# ---------------------------------------------------------------------------

def _check_mode(state: VehicleState, control: ControlInput) -> bool:
    augmented = state.augmented
    want = MODE_DELTA_RATE if augmented else MODE_DELTA
    if control.mode != want:
        raise ValueError(
            f"control mode {control.mode!r} incompatible with "
            f"{'augmented' if augmented else 'plain'} state (expected {want!r})")
    return augmented


def continuous_derivative(state: VehicleState, control: ControlInput,
                          track: Track, params: VehicleParams) -> np.ndarray:
    """Time derivative of the state, ordered like the state vector."""
    augmented = _check_mode(state, control)
    return _xdot(state.as_array(), np.array([control.value]), track, params,
                 augmented).astype(float)


def rk4_step(state: VehicleState, control: ControlInput, track: Track,
             params: VehicleParams, dt: float) -> VehicleState:
    """One RK4 step; sigma is wrapped modulo the track length afterwards."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    augmented = _check_mode(state, control)
    nxt = _rk4_step(state.as_array(), np.array([control.value]), track, params,
                    dt, augmented)
    nxt[IX_SIGMA] = track.wrap(nxt[IX_SIGMA])
    return VehicleState.from_array(nxt.astype(float))
