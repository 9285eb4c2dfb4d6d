"""Demonstration handling, the synthetic expert, and the three trainers.

Open-loop behavioral cloning regresses recorded actions, open-loop
supervised learning regresses future recorded setpoints, and closed-loop
state cloning rolls the policy out on the plant and backpropagates the
lateral-deviation error through time, approximating the plant gradients
with the controller's own prediction model (exact whenever the plant and
the model coincide).
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import IX_D, BicycleModel, Track, VehicleParams, VehicleState
from .errors import DataError, ExpertProfileError, MimicMpcError
from .metrics import RolloutTrace
from .mpc import MpcParams, OcpSpec, Variant, horizon_steps, solve
from .neural import AdamState, adam_step, flatten_params, unflatten_params
from .policies import KIND_MPC, KIND_NN, KIND_NN_MPC, extract_features

DT = 0.1


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MIMIC_MPC_THREADS", "1")))
    except ValueError:
        return 1


def _map_ordered(fn, items):
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Demonstration laps
# ---------------------------------------------------------------------------

@dataclass
class LapRecord:
    """One recorded lap: augmented states plus the applied steering rate."""

    t: np.ndarray        # (n,)
    x: np.ndarray        # (n, 6): beta, psi_dot, sigma, d, phi, delta
    u_rate: np.ndarray   # (n,) steering-rate command applied at each sample
    dt: float = DT

    def __len__(self) -> int:
        return self.t.size

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    def state(self, i: int, augmented: bool) -> VehicleState:
        row = self.x[i]
        if augmented:
            return VehicleState(*row)
        return VehicleState(*row[:5])

    def action(self, i: int, mode: str) -> float:
        return float(self.u_rate[i] if mode == "delta_rate" else self.x[i, 5])


DEMO_HEADER = "t_s,beta,psi_dot,sigma,d,phi,delta,delta_rate"


def save_demos(laps, directory, manifest: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, lap in enumerate(laps):
        name = f"lap_{i:03d}.csv"
        lines = [DEMO_HEADER]
        for j in range(len(lap)):
            vals = [lap.t[j], *lap.x[j], lap.u_rate[j]]
            lines.append(",".join(f"{v:.9f}" for v in vals))
        (directory / name).write_text("\n".join(lines) + "\n")
        files.append(name)
    manifest = dict(manifest)
    manifest["lap_files"] = files
    manifest["dt"] = laps[0].dt if laps else DT
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_demos(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    laps = []
    for name in manifest["lap_files"]:
        rows = (directory / name).read_text().strip().splitlines()
        if rows[0] != DEMO_HEADER:
            raise DataError(f"unexpected demo header in {name}: {rows[0]!r}")
        data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        laps.append(LapRecord(t=data[:, 0], x=data[:, 1:7], u_rate=data[:, 7],
                              dt=manifest.get("dt", DT)))
    if not laps:
        raise DataError("manifest lists no laps")
    return laps, manifest


def track_hash(track: Track) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(track.kappa_samples, dtype=float).tobytes())
    h.update(np.array([track.delta_sigma, track.width]).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Synthetic expert
# ---------------------------------------------------------------------------

@dataclass
class ExpertProfile:
    """Driving-style knobs of the synthetic demonstrator."""

    offset_mean: float = -0.54       # preferred lateral offset (m)
    offset_noise_std: float = 0.35   # stationary std of the wandering (m)
    lowpass_tau: float = 3.0         # s, setpoint noise time constant
    seed: int = 0
    d_la: float = 30.0
    log_w_rate: float = 0.0

    def __post_init__(self):
        if self.offset_noise_std < 0:
            raise ValueError("offset noise std must be >= 0")

    def to_dict(self) -> dict:
        return {"offset_mean": self.offset_mean,
                "offset_noise_std": self.offset_noise_std,
                "lowpass_tau": self.lowpass_tau, "seed": self.seed,
                "d_la": self.d_la, "log_w_rate": self.log_w_rate}


def generate_expert_laps(track: Track, profile: ExpertProfile, n_laps: int,
                         vehicle: VehicleParams | None = None):
    """Roll a setpoint-tracking controller with a wandering lateral target.

    The expert drives continuously for ``n_laps`` loops; the emitted laps
    must stay inside the lane and average within 0.1 m of the profile's
    preferred offset, otherwise the profile is rejected.
    """
    vehicle = vehicle or VehicleParams()
    spec = OcpSpec.for_lookahead(Variant.SETPOINT_RATE, profile.d_la,
                                 vehicle.v_x, dt=DT,
                                 lane_half_width=track.width / 2.0,
                                 polish=False)
    model = BicycleModel(track, vehicle, DT, augmented=True)
    base = MpcParams(Variant.SETPOINT_RATE,
                     np.array([profile.offset_mean, 0.0, profile.log_w_rate]))
    rng = np.random.default_rng(profile.seed)
    lap_steps = int(round(track.length / (vehicle.v_x * DT)))
    total = n_laps * lap_steps

    # Ornstein-Uhlenbeck wander around the preferred offset
    tau, std = profile.lowpass_tau, profile.offset_noise_std
    sigma_w = std * np.sqrt(2.0 / tau)
    noise = 0.0

    x = np.zeros(6)
    xs = np.empty((total, 6))
    us = np.empty(total)
    warm = None
    from .mpc import shift_warm_start
    for t in range(total):
        params_t = base.with_setpoints(profile.offset_mean + noise, 0.0)
        point = solve(spec, params_t, x, model, warm_start=warm)
        xs[t] = x
        us[t] = point.u0
        x = model.step_wrapped(x, np.array([point.u0]))
        warm = shift_warm_start(point, model, x)
        noise += (-noise / tau) * DT + sigma_w * np.sqrt(DT) * rng.standard_normal()

    if np.max(np.abs(xs[:, IX_D])) > track.width / 2.0:
        raise ExpertProfileError(
            f"expert left the lane (|d| up to {np.max(np.abs(xs[:, IX_D])):.2f} m)")
    mean_d = float(np.mean(xs[:, IX_D]))
    if abs(mean_d - profile.offset_mean) > 0.1:
        raise ExpertProfileError(
            f"expert mean offset {mean_d:.3f} m drifted from preferred "
            f"{profile.offset_mean:.3f} m")

    laps = []
    for i in range(n_laps):
        sl = slice(i * lap_steps, (i + 1) * lap_steps)
        laps.append(LapRecord(t=np.arange(lap_steps) * DT, x=xs[sl].copy(),
                              u_rate=us[sl].copy()))
    return laps


# ---------------------------------------------------------------------------
# Slicing and batching
# ---------------------------------------------------------------------------

@dataclass
class Slice:
    """A T-second window of one lap; keeps its lap so trainers can look
    ahead past the window (supervised setpoint targets)."""

    lap_index: int
    lap: LapRecord
    start: int
    length: int  # samples

    def state(self, i: int, augmented: bool) -> VehicleState:
        return self.lap.state(self.start + i, augmented)

    def action(self, i: int, mode: str) -> float:
        return self.lap.action(self.start + i, mode)

    def states_array(self) -> np.ndarray:
        return self.lap.x[self.start:self.start + self.length]

    def bc_pairs(self, augmented: bool, mode: str, stride: int = 1):
        for i in range(0, self.length, stride):
            yield self.state(i, augmented), self.action(i, mode)


@dataclass
class DataSplit:
    train_batches: list
    val_batch: list
    slice_samples: int

    @property
    def n_slices(self) -> int:
        return sum(len(b) for b in self.train_batches) + len(self.val_batch)


def slice_dataset(laps, T: float, batch_size: int, seed: int) -> DataSplit:
    """Overlapping T-second windows (stride T/2), shuffled into batches.

    The last batch after the seeded shuffle is held out for validation.
    """
    if not laps:
        raise DataError("no demonstration laps")
    dt = laps[0].dt
    slice_samples = int(round(T / dt)) + 1
    stride = int(round(T / (2 * dt)))
    slices = []
    for lap_index, lap in enumerate(laps):
        if lap.duration < T:
            raise DataError(f"lap {lap_index} shorter than one slice ({T} s)")
        start = 0
        while start + slice_samples <= len(lap):
            slices.append(Slice(lap_index, lap, start, slice_samples))
            start += stride
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(slices))
    shuffled = [slices[i] for i in order]
    n_batches = len(shuffled) // batch_size
    if n_batches < 2:
        raise DataError(
            f"{len(shuffled)} slices make fewer than 2 batches of {batch_size}")
    batches = [shuffled[i * batch_size:(i + 1) * batch_size]
               for i in range(n_batches)]
    return DataSplit(train_batches=batches[:-1], val_batch=batches[-1],
                     slice_samples=slice_samples)


def count_slices(duration: float, T: float) -> int:
    """Slices of T seconds starting every T/2 in a lap of given duration."""
    if duration < T:
        return 0
    return int(np.floor((duration - T) / (T / 2.0))) + 1


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------

def rollout(policy, plant: BicycleModel, s0: VehicleState, T: float,
            collect_ctx: bool = False):
    """Closed-loop simulation of act -> step for T seconds.

    Returns (RolloutTrace, ctx list). Solver failures and singularity-guard
    violations truncate the rollout; the trace is flagged and downstream
    metrics count the missing steps as violations.
    """
    steps = int(round(T / plant.dt))
    nx = plant.nx
    xs = [s0.as_array()]
    us = []
    ctxs = []
    warm = None
    truncated = False
    state = s0
    for _ in range(steps):
        try:
            action, ctx = policy.act_training(state, warm)
            nxt = plant.step_wrapped(xs[-1], np.array([action]))
        except MimicMpcError:
            truncated = True
            break
        us.append(action)
        xs.append(nxt)
        if collect_ctx:
            ctxs.append(ctx)
        state = VehicleState.from_array(nxt)
        if policy.kind != KIND_NN:
            warm = policy.shift_warm(ctx["kkt"], state)
    xs = np.asarray(xs)
    pad = us[-1] if us else 0.0
    us = np.asarray(us + [pad])[:xs.shape[0]]
    trace = RolloutTrace(t=np.arange(xs.shape[0]) * plant.dt, x=xs, u=us,
                         dt=plant.dt, control_mode=policy.control_mode,
                         planned_steps=steps, truncated=truncated)
    return trace, ctxs


# ---------------------------------------------------------------------------
# Parameter plumbing shared by the trainers
# ---------------------------------------------------------------------------

LR_NN = 1.0e-4
LR_MPC = 1.0e-2


class _ParamGroups:
    """Unified view of a policy's learnable parameters for Adam updates."""

    def __init__(self, policy, lr_nn: float, lr_mpc: float):
        self.policy = policy
        self.adam_net = None
        self.adam_theta = None
        if policy.kind in (KIND_NN, KIND_NN_MPC):
            self.adam_net = AdamState.for_size(policy.mlp.n_params, lr_nn)
        if policy.kind == KIND_MPC:
            self.adam_theta = AdamState.for_size(
                policy.params.values.size, lr_mpc)
        elif policy.kind == KIND_NN_MPC and \
                policy.base_params.variant is Variant.SETPOINT_RATE:
            self.adam_theta = AdamState.for_size(1, lr_mpc)

    def zero_grads(self):
        net = (np.zeros(self.policy.mlp.n_params)
               if self.adam_net is not None else None)
        theta = (np.zeros(self.adam_theta.m.size)
                 if self.adam_theta is not None else None)
        return net, theta

    def accumulate(self, total_net, total_theta, result, weight: float):
        if total_net is not None and result.net_grad is not None:
            total_net += weight * result.net_grad
        if total_theta is not None and result.theta_grad is not None:
            total_theta += weight * result.theta_grad
        return total_net, total_theta

    def apply(self, net_grad, theta_grad, clip_norm: float | None = None):
        if clip_norm is not None:
            parts = [g for g in (net_grad, theta_grad) if g is not None]
            total = np.sqrt(sum(float(g @ g) for g in parts))
            if total > clip_norm:
                scale = clip_norm / total
                net_grad = None if net_grad is None else net_grad * scale
                theta_grad = None if theta_grad is None else theta_grad * scale
        if self.adam_net is not None and net_grad is not None:
            flat = flatten_params(self.policy.mlp)
            unflatten_params(self.policy.mlp,
                             adam_step(self.adam_net, flat, net_grad))
        if self.adam_theta is not None and theta_grad is not None:
            if self.policy.kind == KIND_MPC:
                self.policy.params.values = adam_step(
                    self.adam_theta, self.policy.params.values, theta_grad)
            else:
                vals = self.policy.base_params.values
                vals[2:] = adam_step(self.adam_theta, vals[2:], theta_grad)


@dataclass
class TrainResult:
    loss_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    skipped_samples: int = 0
    total_samples: int = 0
    weak_points: int = 0
    truncated_rollouts: int = 0

    @property
    def skip_fraction(self) -> float:
        return self.skipped_samples / max(1, self.total_samples)


# ---------------------------------------------------------------------------
# Open-loop behavioral cloning
# ---------------------------------------------------------------------------

def _bc_sample_loss_grad(policy, state, target):
    """Per-sample squared action error and its policy backprop."""
    action, ctx = policy.act_training(state)
    err = action - target
    result = policy.backprop(ctx, 2.0 * err)
    return err * err, result


def train_bc(policy, split: DataSplit, epochs: int,
             lr_nn: float = LR_NN, lr_mpc: float = LR_MPC,
             sample_stride: int = 1, val_cap: int = 200) -> TrainResult:
    """L2 regression of recorded actions, Adam per batch."""
    groups = _ParamGroups(policy, lr_nn, lr_mpc)
    augmented = policy.plant_augmented
    mode = policy.control_mode
    out = TrainResult()

    val_pairs = []
    for sl in split.val_batch:
        val_pairs.extend(sl.bc_pairs(augmented, mode))
    if len(val_pairs) > val_cap:
        step = len(val_pairs) // val_cap
        val_pairs = val_pairs[::step][:val_cap]

    for _ in range(epochs):
        epoch_loss, epoch_n = 0.0, 0
        for batch in split.train_batches:
            pairs = []
            for sl in batch:
                pairs.extend(sl.bc_pairs(augmented, mode, sample_stride))
            net_g, theta_g = groups.zero_grads()

            def one(pair):
                state, target = pair
                try:
                    return _bc_sample_loss_grad(policy, state, target)
                except MimicMpcError:
                    return None

            results = _map_ordered(one, pairs)
            kept = 0
            for res in results:
                out.total_samples += 1
                if res is None:
                    out.skipped_samples += 1
                    continue
                loss, grad = res
                kept += 1
                epoch_loss += loss
                out.weak_points += int(grad.weak_point)
                net_g, theta_g = groups.accumulate(net_g, theta_g, grad, 1.0)
            if kept == 0:
                continue
            scale = 1.0 / kept
            groups.apply(None if net_g is None else net_g * scale,
                         None if theta_g is None else theta_g * scale)
            epoch_n += kept
        out.loss_trace.append(epoch_loss / max(1, epoch_n))
        out.val_trace.append(validation_loss(policy, val_pairs))
    return out


def validation_loss(policy, pairs) -> float:
    errs = []
    for state, target in pairs:
        try:
            control, _ = policy.act(state)
        except MimicMpcError:
            continue
        errs.append((control.value - target) ** 2)
    return float(np.mean(errs)) if errs else float("nan")


# ---------------------------------------------------------------------------
# Open-loop supervised setpoint learning
# ---------------------------------------------------------------------------

def sl_pairs(split: DataSplit, horizon: int, track: Track):
    """(features(s*_t), (d*, phi*) at t + horizon) resolved on the parent lap.

    Slices whose lap ends before any lookahead target are dropped.
    """
    batches = []
    dropped = 0
    for batch in split.train_batches + [split.val_batch]:
        pairs = []
        for sl in batch:
            usable = 0
            for i in range(sl.length):
                j = sl.start + i + horizon
                if j >= len(sl.lap):
                    break
                state = sl.state(i, augmented=False)
                target = np.array([sl.lap.x[j, IX_D], sl.lap.x[j, 4]])
                pairs.append((extract_features(state, track), target))
                usable += 1
            if usable == 0:
                dropped += 1
        batches.append(pairs)
    return batches[:-1], batches[-1], dropped


def train_sl(policy, split: DataSplit, epochs: int,
             lr_nn: float = LR_NN) -> TrainResult:
    """Regress the high-level network onto future recorded pose setpoints."""
    if policy.kind != KIND_NN_MPC:
        raise ValueError("supervised setpoint learning needs the hierarchical kind")
    from . import neural
    from .policies import PHI_SETPOINT_LIMIT, squash, squash_grad

    train_pairs, val_pairs, _ = sl_pairs(split, policy.spec.horizon,
                                         policy.track)
    adam = AdamState.for_size(policy.mlp.n_params, lr_nn)
    out = TrainResult()

    def predict(scaled):
        raw, cache = neural.forward_cached(policy.mlp, scaled)
        pred = np.array([squash(raw[0], policy.d_limit),
                         squash(raw[1], PHI_SETPOINT_LIMIT)])
        return raw, cache, pred

    for _ in range(epochs):
        epoch_loss, epoch_n = 0.0, 0
        for pairs in train_pairs:
            if not pairs:
                continue
            total = np.zeros(policy.mlp.n_params)
            for feats, target in pairs:
                scaled = feats * policy.feature_scaling
                raw, cache, pred = predict(scaled)
                err = pred - target
                epoch_loss += float(err @ err)
                d_raw = 2.0 * err * np.array([
                    squash_grad(raw[0], policy.d_limit),
                    squash_grad(raw[1], PHI_SETPOINT_LIMIT)])
                grads, _ = neural.backward(policy.mlp, cache, d_raw)
                total += neural.flatten_grads(policy.mlp, grads)
                out.total_samples += 1
            epoch_n += len(pairs)
            flat = flatten_params(policy.mlp)
            unflatten_params(policy.mlp,
                             adam_step(adam, flat, total / len(pairs)))
        out.loss_trace.append(epoch_loss / max(1, epoch_n))
        val_loss = 0.0
        for feats, target in val_pairs:
            _, _, pred = predict(feats * policy.feature_scaling)
            val_loss += float((pred - target) @ (pred - target))
        out.val_trace.append(val_loss / max(1, len(val_pairs)))
    return out


# ---------------------------------------------------------------------------
# Closed-loop state cloning (BPTT)
# ---------------------------------------------------------------------------

def sc_trajectory_gradient(policy, ref_states: np.ndarray,
                           plant: BicycleModel, grad_model: BicycleModel,
                           full_state_loss: bool = False):
    """Loss and parameter gradient of one state-cloning trajectory.

    Rolls the policy from the reference's first state, then sweeps backward
    through time: the plant gradients are approximated by ``grad_model``
    (the controller's model), action gradients flow through the policy's
    KKT adjoints, and the feature path feeds state cotangents.
    """
    steps = ref_states.shape[0] - 1
    s0 = VehicleState.from_array(ref_states[0, :plant.nx])
    trace, ctxs = rollout(policy, plant, s0,
                          steps * plant.dt, collect_ctx=True)
    n_done = len(ctxs)
    loss = 0.0
    weak = 0
    net_total = (np.zeros(policy.mlp.n_params)
                 if policy.kind in (KIND_NN, KIND_NN_MPC) else None)
    theta_total = None
    if policy.kind == KIND_MPC:
        theta_total = np.zeros(policy.params.values.size)
    elif policy.kind == KIND_NN_MPC and \
            policy.base_params.variant is Variant.SETPOINT_RATE:
        theta_total = np.zeros(1)

    nx = plant.nx
    p = np.zeros(nx)
    for t in range(n_done - 1, -1, -1):
        s_next = trace.x[t + 1]
        ref = ref_states[t + 1]
        if full_state_loss:
            diff = s_next[:nx] - ref[:nx]
            loss += float(diff @ diff)
            grad_l = 2.0 * diff
        else:
            diff = s_next[IX_D] - ref[IX_D]
            loss += float(diff * diff)
            grad_l = np.zeros(nx)
            grad_l[IX_D] = 2.0 * diff
        p = p + grad_l
        A, B = grad_model.jacobians(trace.x[t], np.array([trace.u[t]]))
        a_bar = float(B[:, 0] @ p)
        result = policy.backprop(ctxs[t], a_bar)
        weak += int(result.weak_point)
        if net_total is not None and result.net_grad is not None:
            net_total += result.net_grad
        if theta_total is not None and result.theta_grad is not None:
            theta_total += result.theta_grad
        p = A.T @ p + result.d_state
    return loss, net_total, theta_total, {
        "truncated": trace.truncated, "weak": weak, "steps": n_done}


def train_sc(policy, trajectories, epochs: int, plant: BicycleModel,
             grad_model: BicycleModel | None = None, batch_size: int = 10,
             lr_nn: float = LR_NN, lr_mpc: float = LR_MPC,
             clip_norm: float = 10.0,
             full_state_loss: bool = False) -> TrainResult:
    """Closed-loop fine-tuning on T-second reference trajectories."""
    grad_model = grad_model or plant
    groups = _ParamGroups(policy, lr_nn, lr_mpc)
    out = TrainResult()
    refs = [sl.states_array()[:, :plant.nx] for sl in trajectories]
    batches = [refs[i:i + batch_size] for i in range(0, len(refs), batch_size)]

    for _ in range(epochs):
        epoch_loss, epoch_steps = 0.0, 0
        for batch in batches:
            def one(ref):
                try:
                    return sc_trajectory_gradient(policy, ref, plant,
                                                  grad_model, full_state_loss)
                except MimicMpcError:
                    return None

            results = _map_ordered(one, batch)
            net_g, theta_g = groups.zero_grads()
            kept = 0
            for res in results:
                out.total_samples += 1
                if res is None:
                    out.skipped_samples += 1
                    continue
                loss, net, theta, info = res
                kept += 1
                epoch_loss += loss
                epoch_steps += info["steps"]
                out.weak_points += info["weak"]
                out.truncated_rollouts += int(info["truncated"])
                if net_g is not None and net is not None:
                    net_g += net
                if theta_g is not None and theta is not None:
                    theta_g += theta
            if kept == 0:
                continue
            scale = 1.0 / kept
            groups.apply(None if net_g is None else net_g * scale,
                         None if theta_g is None else theta_g * scale,
                         clip_norm=clip_norm)
        out.loss_trace.append(epoch_loss / max(1, epoch_steps))
    return out
