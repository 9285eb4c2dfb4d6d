"""The three lane-keeping policy forms behind one acting interface.

* ``NnPolicy``      - network maps features straight to a steering angle.
* ``MpcPolicy``     - the controller itself carries the learnable weights.
* ``HierarchicalPolicy`` - network maps features to controller setpoints,
  the controller produces the action.

Each policy also exposes the reverse-mode chain the trainers need: given a
cotangent on the action, ``backprop`` returns gradients for the learnable
parameters and, for closed-loop training, the cotangent on the state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neural
from .dynamics import (
    IX_D,
    IX_PHI,
    IX_SIGMA,
    BicycleModel,
    ControlInput,
    Track,
    VehicleParams,
    VehicleState,
)
from .mpc import KktPoint, MpcParams, OcpSpec, Variant, shift_warm_start, solve
from .sensitivity import adjoint_solve, kkt_system, seed_on_u0

KIND_NN = "nn"
KIND_MPC = "mpc"
KIND_NN_MPC = "nn_mpc"

FEATURE_OFFSETS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
N_FEATURES = 2 + len(FEATURE_OFFSETS)
# kappa values are ~1e-2 1/m; the x100 scaling brings them to order one
DEFAULT_FEATURE_SCALING = np.array([1.0, 1.0] + [100.0] * len(FEATURE_OFFSETS))

PHI_SETPOINT_LIMIT = 0.3


def extract_features(state: VehicleState, track: Track) -> np.ndarray:
    """(d, phi, kappa at 0..30 m lookahead), unscaled."""
    feats = np.empty(N_FEATURES)
    feats[0] = state.d
    feats[1] = state.phi
    for i, off in enumerate(FEATURE_OFFSETS):
        feats[2 + i] = track.kappa(state.sigma + off)
    return feats


def feature_state_jacobian(state: VehicleState, track: Track,
                           nx: int) -> np.ndarray:
    """d(features)/d(state vector), shape (N_FEATURES, nx)."""
    J = np.zeros((N_FEATURES, nx))
    J[0, IX_D] = 1.0
    J[1, IX_PHI] = 1.0
    for i, off in enumerate(FEATURE_OFFSETS):
        J[2 + i, IX_SIGMA] = track.kappa_slope(state.sigma + off)
    return J


def squash(raw: float, limit: float) -> float:
    """Scaled tanh: slope one at zero, saturating at +/- limit."""
    return limit * np.tanh(raw / limit)


def squash_grad(raw: float, limit: float) -> float:
    t = np.tanh(raw / limit)
    return 1.0 - t * t


@dataclass
class BackpropResult:
    """Gradients produced by one reverse step through a policy action."""

    net_grad: np.ndarray | None      # flat, None for the pure-controller kind
    theta_grad: np.ndarray | None    # controller parameters, None for NN kind
    d_state: np.ndarray              # cotangent on the state vector
    weak_point: bool = False         # one-sided derivative was used


class NnPolicy:
    """Direct steering network; output squashed to the steering box."""

    kind = KIND_NN
    control_mode = "delta"

    def __init__(self, mlp: neural.Mlp, track: Track,
                 feature_scaling=DEFAULT_FEATURE_SCALING,
                 delta_limit: float = 0.6):
        if mlp.sizes[0] != N_FEATURES or mlp.sizes[-1] != 1:
            raise ValueError("direct steering net must map 9 features to 1 output")
        self.mlp = mlp
        self.track = track
        self.feature_scaling = np.asarray(feature_scaling, dtype=float)
        self.delta_limit = float(delta_limit)

    @property
    def plant_augmented(self) -> bool:
        return False

    def act(self, state: VehicleState, warm: KktPoint | None = None):
        action, _ = self.act_training(state)
        return ControlInput(action, "delta"), {"warm": None}

    def act_training(self, state: VehicleState, warm: KktPoint | None = None):
        feats = extract_features(state, self.track)
        scaled = feats * self.feature_scaling
        raw, cache = neural.forward_cached(self.mlp, scaled)
        action = squash(raw[0], self.delta_limit)
        ctx = {"state": state, "cache": cache, "raw": raw[0]}
        return float(action), ctx

    def backprop(self, ctx, d_action: float) -> BackpropResult:
        d_raw = d_action * squash_grad(ctx["raw"], self.delta_limit)
        grads, d_scaled = neural.backward(self.mlp, ctx["cache"],
                                          np.array([d_raw]))
        d_feats = d_scaled * self.feature_scaling
        nx = 5
        J = feature_state_jacobian(ctx["state"], self.track, nx)
        return BackpropResult(net_grad=neural.flatten_grads(self.mlp, grads),
                              theta_grad=None, d_state=J.T @ d_feats)


class MpcPolicy:
    """Receding-horizon controller whose objective parameters are learned."""

    kind = KIND_MPC

    def __init__(self, spec: OcpSpec, params: MpcParams, track: Track,
                 vehicle: VehicleParams):
        self.spec = spec
        self.params = params
        self.track = track
        self.vehicle = vehicle
        self.model = BicycleModel(track, vehicle, spec.dt,
                                  spec.variant.augmented)

    @property
    def control_mode(self) -> str:
        return self.spec.variant.control_mode

    @property
    def plant_augmented(self) -> bool:
        return self.spec.variant.augmented

    def act(self, state: VehicleState, warm: KktPoint | None = None):
        action, ctx = self.act_training(state, warm)
        return ControlInput(action, self.control_mode), {
            "kkt": ctx["kkt"], "warm": ctx["kkt"]}

    def act_training(self, state: VehicleState, warm: KktPoint | None = None):
        x0 = state.as_array()
        point = solve(self.spec, self.params, x0, self.model, warm_start=warm)
        ctx = {"kkt": point, "x0": x0, "params": self.params}
        return point.u0, ctx

    def backprop(self, ctx, d_action: float) -> BackpropResult:
        point = ctx["kkt"]
        weak = point.strict_comp_margin < 1e-8
        core = kkt_system(point, self.spec, ctx["params"], ctx["x0"],
                          self.model, allow_weak=True)
        seed = seed_on_u0(point, d_action)
        theta_grad = adjoint_solve(core, seed_u=seed, which="wrt_params")
        d_state = adjoint_solve(core, seed_u=seed, which="wrt_initial_state")
        return BackpropResult(net_grad=None, theta_grad=theta_grad,
                              d_state=d_state, weak_point=weak)

    def shift_warm(self, point: KktPoint, next_state: VehicleState) -> KktPoint:
        return shift_warm_start(point, self.model, next_state.as_array())


class HierarchicalPolicy:
    """High-level network emits controller setpoints, clamped to stay sane.

    The lateral setpoint is squashed into the lane, the heading setpoint
    into +/- 0.3 rad, so the low-level problem stays well posed under an
    untrained network.
    """

    kind = KIND_NN_MPC

    def __init__(self, mlp: neural.Mlp, spec: OcpSpec, base_params: MpcParams,
                 track: Track, vehicle: VehicleParams,
                 feature_scaling=DEFAULT_FEATURE_SCALING):
        if spec.variant is Variant.WEIGHTS:
            raise ValueError("hierarchical policies need a setpoint variant")
        if mlp.sizes[0] != N_FEATURES or mlp.sizes[-1] != 2:
            raise ValueError("setpoint net must map 9 features to 2 outputs")
        self.mlp = mlp
        self.spec = spec
        self.base_params = base_params
        self.track = track
        self.vehicle = vehicle
        self.feature_scaling = np.asarray(feature_scaling, dtype=float)
        self.model = BicycleModel(track, vehicle, spec.dt,
                                  spec.variant.augmented)
        self.d_limit = spec.lane_half_width

    @property
    def control_mode(self) -> str:
        return self.spec.variant.control_mode

    @property
    def plant_augmented(self) -> bool:
        return self.spec.variant.augmented

    def setpoints(self, state: VehicleState):
        feats = extract_features(state, self.track)
        scaled = feats * self.feature_scaling
        raw, cache = neural.forward_cached(self.mlp, scaled)
        dbar = squash(raw[0], self.d_limit)
        phibar = squash(raw[1], PHI_SETPOINT_LIMIT)
        return (float(dbar), float(phibar)), raw, cache

    def act(self, state: VehicleState, warm: KktPoint | None = None):
        action, ctx = self.act_training(state, warm)
        return ControlInput(action, self.control_mode), {
            "kkt": ctx["kkt"], "theta_t": ctx["params"].values.copy(),
            "warm": ctx["kkt"]}

    def act_training(self, state: VehicleState, warm: KktPoint | None = None):
        (dbar, phibar), raw, cache = self.setpoints(state)
        params_t = self.base_params.with_setpoints(dbar, phibar)
        x0 = state.as_array()
        point = solve(self.spec, params_t, x0, self.model, warm_start=warm)
        ctx = {"kkt": point, "x0": x0, "params": params_t, "raw": raw,
               "cache": cache, "state": state}
        return point.u0, ctx

    def backprop(self, ctx, d_action: float) -> BackpropResult:
        point = ctx["kkt"]
        weak = point.strict_comp_margin < 1e-8
        core = kkt_system(point, self.spec, ctx["params"], ctx["x0"],
                          self.model, allow_weak=True)
        seed = seed_on_u0(point, d_action)
        theta_grad = adjoint_solve(core, seed_u=seed, which="wrt_params")
        d_x0 = adjoint_solve(core, seed_u=seed, which="wrt_initial_state")

        raw = ctx["raw"]
        d_raw = np.array([
            theta_grad[0] * squash_grad(raw[0], self.d_limit),
            theta_grad[1] * squash_grad(raw[1], PHI_SETPOINT_LIMIT),
        ])
        grads, d_scaled = neural.backward(self.mlp, ctx["cache"], d_raw)
        d_feats = d_scaled * self.feature_scaling
        J = feature_state_jacobian(ctx["state"], self.track, self.model.nx)
        d_state = d_x0 + J.T @ d_feats
        # any parameter slots beyond the two setpoints (the rate weight)
        # belong to the globally learned controller parameters
        extra = theta_grad[2:] if theta_grad.size > 2 else None
        return BackpropResult(net_grad=neural.flatten_grads(self.mlp, grads),
                              theta_grad=extra, d_state=d_state,
                              weak_point=weak)

    def shift_warm(self, point: KktPoint, next_state: VehicleState) -> KktPoint:
        return shift_warm_start(point, self.model, next_state.as_array())


# ---------------------------------------------------------------------------
# Checkpoint bundles
# ---------------------------------------------------------------------------

def _spec_to_dict(spec: OcpSpec) -> dict:
    return {
        "variant": spec.variant.value,
        "horizon": spec.horizon,
        "dt": spec.dt,
        "d_la": spec.d_la,
        "lane_half_width": spec.lane_half_width,
        "delta_max": spec.delta_max,
        "delta_rate_max": spec.delta_rate_max,
        "beta_max": spec.beta_max,
        "psi_dot_max": spec.psi_dot_max,
        "slack_weight": spec.slack_weight,
        "tol": spec.tol,
        "max_iter": spec.max_iter,
    }


def _spec_from_dict(data: dict) -> OcpSpec:
    data = dict(data)
    data["variant"] = Variant(data["variant"])
    return OcpSpec(**data)


def save_policy(policy, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"kind": policy.kind, "control_mode": policy.control_mode}
    if policy.kind == KIND_NN:
        meta["delta_limit"] = policy.delta_limit
        neural.save_mlp(policy.mlp, directory / "network.json",
                        policy.feature_scaling, "direct")
    else:
        (directory / "ocp_spec.json").write_text(
            json.dumps(_spec_to_dict(policy.spec), indent=2) + "\n")
        params = policy.params if policy.kind == KIND_MPC else policy.base_params
        (directory / "mpc_params.json").write_text(json.dumps({
            "variant": params.variant.value,
            "values": params.values.tolist(),
        }, indent=2) + "\n")
        if policy.kind == KIND_NN_MPC:
            neural.save_mlp(policy.mlp, directory / "network.json",
                            policy.feature_scaling, policy.spec.variant.value)
    (directory / "policy.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_policy(directory, track: Track, vehicle: VehicleParams):
    directory = Path(directory)
    meta = json.loads((directory / "policy.json").read_text())
    kind = meta["kind"]
    if kind == KIND_NN:
        mlp, scaling, _ = neural.load_mlp(directory / "network.json")
        return NnPolicy(mlp, track, scaling, meta["delta_limit"])
    spec = _spec_from_dict(json.loads((directory / "ocp_spec.json").read_text()))
    pdata = json.loads((directory / "mpc_params.json").read_text())
    params = MpcParams(Variant(pdata["variant"]), np.array(pdata["values"]))
    if kind == KIND_MPC:
        return MpcPolicy(spec, params, track, vehicle)
    mlp, scaling, _ = neural.load_mlp(directory / "network.json")
    return HierarchicalPolicy(mlp, spec, params, track, vehicle, scaling)
