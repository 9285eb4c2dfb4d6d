"""Evaluation metrics: imitation, safety, comfort and human-likeness.

The closed-loop imitation score models the expert's lateral deviation as
independent per-arclength-bin Gaussians (mean and variance binned over the
demonstration laps) and averages the density of the rollout's deviation
under them. Safety counts lane violations, comfort summarizes lateral
jerk, human-likeness compares deviation statistics and the steering
reversal rate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, filtfilt

from .dynamics import IX_D, VehicleParams
from .errors import DataError


@dataclass
class RolloutTrace:
    """Closed-loop simulation record consumed by the metric functions."""

    t: np.ndarray          # (n,) seconds
    x: np.ndarray          # (n, nx) states
    u: np.ndarray          # (n,) applied controls
    dt: float
    control_mode: str      # "delta" or "delta_rate"
    planned_steps: int     # requested rollout length
    truncated: bool = False

    @property
    def d(self) -> np.ndarray:
        return self.x[:, IX_D]

    @property
    def sigma(self) -> np.ndarray:
        return self.x[:, 2]

    def delta_trace(self) -> np.ndarray:
        """Road-wheel steering angle over time, whichever the control mode."""
        if self.control_mode == "delta_rate":
            return self.x[:, 5]
        return self.u


@dataclass
class ReferenceStats:
    """Per-arclength-bin Gaussian statistics of expert lateral deviation."""

    centers: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    bin_width: float
    track_length: float
    interpolated_bins: list = field(default_factory=list)

    def lookup(self, sigma):
        """Mean/variance linearly interpolated between bin centers."""
        n = self.centers.size
        pos = (np.asarray(sigma, dtype=float) / self.bin_width - 0.5) % n
        i0 = np.floor(pos).astype(int) % n
        i1 = (i0 + 1) % n
        frac = pos - np.floor(pos)
        mu = self.mean[i0] * (1 - frac) + self.mean[i1] * frac
        var = self.var[i0] * (1 - frac) + self.var[i1] * frac
        return mu, var

    def to_json_dict(self) -> dict:
        return {
            "bin_width": self.bin_width,
            "track_length": self.track_length,
            "centers": self.centers.tolist(),
            "mean": self.mean.tolist(),
            "var": self.var.tolist(),
            "interpolated_bins": list(self.interpolated_bins),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ReferenceStats":
        return cls(centers=np.array(data["centers"]),
                   mean=np.array(data["mean"]), var=np.array(data["var"]),
                   bin_width=data["bin_width"],
                   track_length=data["track_length"],
                   interpolated_bins=list(data["interpolated_bins"]))


VAR_FLOOR = 1.0e-4
SMOOTH_BINS = 5


def build_reference_stats(laps, track_length: float,
                          bin_width: float = 1.0,
                          var_floor: float = VAR_FLOOR,
                          smooth_bins: int = SMOOTH_BINS) -> ReferenceStats:
    """Bin expert (sigma, d) samples; population variance, floored, smoothed.

    ``laps`` is an iterable of (sigma_array, d_array) pairs; at least two
    laps are required. Empty bins are filled by linear interpolation from
    their circular neighbors and reported in ``interpolated_bins``.
    """
    laps = list(laps)
    if len(laps) < 2:
        raise DataError("reference statistics need at least 2 laps")
    n_bins = int(round(track_length / bin_width))
    sums = np.zeros(n_bins)
    sqsums = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=int)
    for sigmas, ds in laps:
        idx = (np.floor(np.asarray(sigmas) / bin_width).astype(int)) % n_bins
        np.add.at(sums, idx, ds)
        np.add.at(sqsums, idx, np.square(ds))
        np.add.at(counts, idx, 1)

    mean = np.zeros(n_bins)
    var = np.zeros(n_bins)
    filled = counts > 0
    mean[filled] = sums[filled] / counts[filled]
    var[filled] = sqsums[filled] / counts[filled] - mean[filled] ** 2
    empty = np.flatnonzero(~filled)
    if empty.size == n_bins:
        raise DataError("no samples fell into any arclength bin")
    for b in empty:
        lo = b
        while not filled[lo % n_bins]:
            lo -= 1
        hi = b
        while not filled[hi % n_bins]:
            hi += 1
        span = hi - lo
        w = (b - lo) / span
        mean[b] = (1 - w) * mean[lo % n_bins] + w * mean[hi % n_bins]
        var[b] = (1 - w) * var[lo % n_bins] + w * var[hi % n_bins]

    var = np.maximum(var, var_floor)
    if smooth_bins > 1:
        kernel = np.ones(smooth_bins) / smooth_bins
        pad = smooth_bins // 2
        var = np.convolve(np.concatenate([var[-pad:], var, var[:pad]]),
                          kernel, mode="valid")
    centers = (np.arange(n_bins) + 0.5) * bin_width
    return ReferenceStats(centers=centers, mean=mean, var=var,
                          bin_width=bin_width, track_length=track_length,
                          interpolated_bins=empty.tolist())


def cl_likelihood(sigmas, ds, stats: ReferenceStats) -> float:
    """Mean Gaussian density of the rollout's lateral deviation.

    Pass the rollout samples for steps 1..T (the neutral starting point is
    not scored).
    """
    sigmas = np.asarray(sigmas, dtype=float)
    ds = np.asarray(ds, dtype=float)
    mu, var = stats.lookup(sigmas)
    dens = np.exp(-0.5 * (ds - mu) ** 2 / var) / np.sqrt(2.0 * np.pi * var)
    return float(np.mean(dens))


def cl_likelihood_of_trace(trace: RolloutTrace, stats: ReferenceStats) -> float:
    return cl_likelihood(trace.sigma[1:], trace.d[1:], stats)


def ol_error(policy, pairs):
    """Mean +/- std of |policy action - recorded action| over (state, action)."""
    errors = []
    for state, recorded in pairs:
        control, _ = policy.act(state)
        errors.append(abs(control.value - float(recorded)))
    if not errors:
        raise DataError("empty validation set")
    errors = np.asarray(errors)
    return float(np.mean(errors)), float(np.std(errors))


def offroad_count(trace: RolloutTrace, width: float) -> int:
    """Timesteps with |d| beyond the lane; truncated steps all count."""
    violations = int(np.sum(np.abs(trace.d) > width / 2.0))
    if trace.truncated:
        violations += trace.planned_steps - (trace.x.shape[0] - 1)
    return violations


def jerk_from_lateral_accel(a_y, dt: float) -> np.ndarray:
    """Central-difference lateral jerk from an acceleration series."""
    a_y = np.asarray(a_y, dtype=float)
    if a_y.size < 3:
        raise DataError("need at least 3 samples for jerk")
    return (a_y[2:] - a_y[:-2]) / (2.0 * dt)


def lateral_acceleration(trace: RolloutTrace, params: VehicleParams) -> np.ndarray:
    """a_y = v_x (psi_dot + beta_dot) with beta_dot from the lateral model."""
    a11, a12, _, _, b1, _ = params.lateral_coefficients()
    beta = trace.x[:, 0]
    psi_dot = trace.x[:, 1]
    delta = trace.delta_trace()
    beta_dot = a11 * beta + a12 * psi_dot + b1 * delta
    return params.v_x * (psi_dot + beta_dot)


def lateral_jerk_stats(trace: RolloutTrace, params: VehicleParams,
                       signed: bool = False):
    """Mean +/- std of lateral jerk; magnitudes unless ``signed``."""
    j = jerk_from_lateral_accel(lateral_acceleration(trace, params), trace.dt)
    if not signed:
        j = np.abs(j)
    return float(np.mean(j)), float(np.std(j))


REVERSAL_THRESHOLD_RAD = np.deg2rad(5.0)
SRR_CUTOFF_HZ = 0.6


def _turning_values(signal: np.ndarray) -> np.ndarray:
    diffs = np.diff(signal)
    sign = np.zeros_like(diffs)
    last = 0.0
    for i, dv in enumerate(diffs):
        if dv > 0:
            last = 1.0
        elif dv < 0:
            last = -1.0
        sign[i] = last
    turns = [signal[0]]
    for i in range(1, sign.size):
        if sign[i] != 0 and sign[i - 1] != 0 and sign[i] != sign[i - 1]:
            turns.append(signal[i])
    turns.append(signal[-1])
    return np.asarray(turns)


def _count_reversals(values: np.ndarray, gap: float) -> int:
    count = 0
    anchor = values[0]
    direction = 0.0
    for v in values[1:]:
        delta = v - anchor
        if direction == 0.0:
            if abs(delta) >= gap:
                count += 1
                direction = np.sign(delta)
                anchor = v
        elif np.sign(delta) == direction:
            anchor = max(anchor, v) if direction > 0 else min(anchor, v)
        elif abs(delta) >= gap:
            count += 1
            direction = -direction
            anchor = v
    return count


def srr(delta_trace, dt: float, params: VehicleParams,
        threshold: float = REVERSAL_THRESHOLD_RAD,
        cutoff_hz: float = SRR_CUTOFF_HZ) -> float:
    """Steering reversal rate per minute on the hand-wheel angle.

    The road-wheel trace is scaled by the steering ratio, low-pass filtered
    with a zero-phase 2nd-order Butterworth at ``cutoff_hz``, and
    alternating extremum-to-extremum excursions beyond the threshold are
    counted.
    """
    delta_trace = np.asarray(delta_trace, dtype=float)
    duration_s = delta_trace.size * dt
    if duration_s < 2.0:
        raise DataError("steering trace shorter than 2 s")
    hand = delta_trace * params.steering_ratio
    b, a = butter(2, cutoff_hz / (0.5 / dt))
    filtered = filtfilt(b, a, hand)
    reversals = _count_reversals(_turning_values(filtered), threshold)
    return 60.0 * reversals / duration_s


def srr_of_trace(trace: RolloutTrace, params: VehicleParams) -> float:
    return srr(trace.delta_trace(), trace.dt, params)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    config: dict
    ol_error_mean: float | None
    ol_error_std: float | None
    cl_likelihood: float
    offroad_count: int
    jerk_mean: float
    jerk_std: float
    d_mean: float
    d_std: float
    srr: float

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "ol_error": (None if self.ol_error_mean is None else
                         {"mean": self.ol_error_mean, "std": self.ol_error_std}),
            "cl_likelihood": self.cl_likelihood,
            "offroad_count": self.offroad_count,
            "jerk": {"mean": self.jerk_mean, "std": self.jerk_std},
            "d": {"mean": self.d_mean, "std": self.d_std},
            "srr": self.srr,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def from_json_dict(cls, data: dict) -> "MetricsReport":
        ol = data.get("ol_error")
        return cls(config=data.get("config", {}),
                   ol_error_mean=None if ol is None else ol["mean"],
                   ol_error_std=None if ol is None else ol["std"],
                   cl_likelihood=data["cl_likelihood"],
                   offroad_count=data["offroad_count"],
                   jerk_mean=data["jerk"]["mean"], jerk_std=data["jerk"]["std"],
                   d_mean=data["d"]["mean"], d_std=data["d"]["std"],
                   srr=data["srr"])


TABLE_HEADER = (
    f"{'Configuration':<32} | {'OL':>13} | {'CL':>6} | {'Off-Road':>8} | "
    f"{'j_y':>13} | {'d':>15} | {'SRR':>6}"
)


def report_table_row(report: MetricsReport) -> str:
    cfg = report.config
    label = " ".join(str(cfg.get(k, "/")) for k in
                     ("policy", "algorithm", "control", "d_la"))
    ol = ("/" if report.ol_error_mean is None else
          f"{report.ol_error_mean:.3f} ± {report.ol_error_std:.3f}")
    return (f"{label:<32} | {ol:>13} | {report.cl_likelihood:>6.2f} | "
            f"{report.offroad_count:>8d} | "
            f"{report.jerk_mean:.2f} ± {report.jerk_std:.2f}".rjust(13) + " | "
            + f"{report.d_mean:.2f} ± {report.d_std:.2f}".rjust(15) + " | "
            + f"{report.srr:>6.2f}")


def render_report_table(reports) -> str:
    lines = [TABLE_HEADER, "-" * len(TABLE_HEADER)]
    lines += [report_table_row(r) for r in reports]
    return "\n".join(lines) + "\n"
