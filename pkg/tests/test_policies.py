import numpy as np
import pytest

from mimic_mpc.dynamics import BicycleModel, Track, VehicleState
from mimic_mpc.mpc import MpcParams, OcpSpec, Variant, stage_cost
from mimic_mpc.neural import flatten_params, init_mlp, unflatten_params
from mimic_mpc.policies import (
    DEFAULT_FEATURE_SCALING,
    HierarchicalPolicy,
    MpcPolicy,
    NnPolicy,
    extract_features,
    load_policy,
    save_policy,
    squash,
)


def steering_net(seed=0, zero=False):
    net = init_mlp([9, 64, 32, 16, 1], np.random.default_rng(seed))
    if zero:
        unflatten_params(net, np.zeros(net.n_params))
    return net


def setpoint_net(seed=0, zero=False):
    net = init_mlp([9, 64, 32, 16, 2], np.random.default_rng(seed))
    if zero:
        unflatten_params(net, np.zeros(net.n_params))
    return net


class TestExtractFeatures:
    def test_straight_track_zero_state(self, straight_track):
        feats = extract_features(VehicleState(), straight_track)
        assert np.all(feats == 0.0)
        assert feats.shape == (9,)

    def test_offsets_read_upcoming_plateau(self):
        # plateau of kappa = 0.02 starting at sigma = 10
        samples = np.zeros(100)
        samples[10:] = 0.02
        samples[5:10] = np.linspace(0.0, 0.02, 6)[1:]  # short ramp
        track = Track(samples, 1.0, 3.5)
        feats = extract_features(VehicleState(sigma=0.0), track)
        assert np.allclose(feats[4:], 0.02)  # kappa(10)..kappa(30)
        assert feats[2] == 0.0               # kappa(0)
        assert 0.0 < feats[3] <= 0.02        # kappa(5) on the ramp

    def test_state_features_track_independent(self, default_track, straight_track):
        s = VehicleState(d=0.5, phi=0.1, sigma=300.0)
        for track in (default_track, straight_track):
            feats = extract_features(s, track)
            assert feats[0] == 0.5
            assert feats[1] == 0.1

    def test_offsets_wrap_around_track_end(self, default_track):
        s = VehicleState(sigma=default_track.length - 1.0)
        feats = extract_features(s, default_track)
        expected = [default_track.kappa((s.sigma + off) % default_track.length)
                    for off in (0, 5, 10, 15, 20, 25, 30)]
        assert np.allclose(feats[2:], expected)


class TestNnPolicy:
    def test_zero_net_zero_action(self, straight_track):
        policy = NnPolicy(steering_net(zero=True), straight_track)
        control, aux = policy.act(VehicleState(d=0.7, phi=-0.1))
        assert control.value == 0.0
        assert control.mode == "delta"

    def test_action_respects_limit(self, straight_track):
        net = steering_net(seed=5)
        unflatten_params(net, 50.0 * np.ones(net.n_params))
        policy = NnPolicy(net, straight_track)
        control, _ = policy.act(VehicleState(d=1.0, phi=0.3))
        assert abs(control.value) <= policy.delta_limit

    def test_backprop_matches_fd(self, default_track):
        policy = NnPolicy(steering_net(seed=8), default_track)
        state = VehicleState(0.01, -0.05, 150.0, 0.4, 0.06)
        action, ctx = policy.act_training(state)
        result = policy.backprop(ctx, 1.0)
        flat = flatten_params(policy.mlp)
        eps = 1e-6
        rng = np.random.default_rng(0)
        for i in rng.choice(flat.size, 25, replace=False):
            fp, fm = flat.copy(), flat.copy()
            fp[i] += eps
            fm[i] -= eps
            unflatten_params(policy.mlp, fp)
            up, _ = policy.act_training(state)
            unflatten_params(policy.mlp, fm)
            dn, _ = policy.act_training(state)
            unflatten_params(policy.mlp, flat)
            assert result.net_grad[i] == pytest.approx((up - dn) / (2 * eps),
                                                       rel=1e-4, abs=1e-9)

    def test_state_cotangent_matches_fd(self, default_track):
        policy = NnPolicy(steering_net(seed=8), default_track)
        state = VehicleState(0.01, -0.05, 150.5, 0.4, 0.06)
        _, ctx = policy.act_training(state)
        result = policy.backprop(ctx, 1.0)
        eps = 1e-6
        arr = state.as_array()
        for j in (3, 4):  # d and phi enter the features directly
            xp, xm = arr.copy(), arr.copy()
            xp[j] += eps
            xm[j] -= eps
            up, _ = policy.act_training(VehicleState.from_array(xp))
            dn, _ = policy.act_training(VehicleState.from_array(xm))
            assert result.d_state[j] == pytest.approx((up - dn) / (2 * eps),
                                                      rel=1e-4, abs=1e-9)


class TestMpcPolicy:
    def test_straight_zero_state_zero_action(self, straight_track, params):
        spec = OcpSpec(variant=Variant.WEIGHTS, horizon=7)
        policy = MpcPolicy(spec, MpcParams.zeros(Variant.WEIGHTS),
                           straight_track, params)
        control, aux = policy.act(VehicleState())
        assert control.value == pytest.approx(0.0, abs=1e-10)
        assert aux["kkt"].kkt_residual <= 1e-6

    def test_action_within_box_by_construction(self, default_track, params):
        spec = OcpSpec(variant=Variant.WEIGHTS, horizon=7)
        theta = MpcParams(Variant.WEIGHTS, np.array([2.0, 0.0, -3.0, 1.0]))
        policy = MpcPolicy(spec, theta, default_track, params)
        control, _ = policy.act(VehicleState(d=-1.4, sigma=90.0))
        assert abs(control.value) <= spec.delta_max + 1e-9

    def test_mirror_symmetry_on_straight(self, straight_track, params):
        spec = OcpSpec(variant=Variant.WEIGHTS, horizon=7)
        theta = MpcParams(Variant.WEIGHTS, np.array([0.3, 0.2, 0.0, 0.0]))
        policy = MpcPolicy(spec, theta, straight_track, params)
        s = VehicleState(0.01, 0.08, 50.0, 0.6, 0.04)
        mirrored = VehicleState(-0.01, -0.08, 50.0, -0.6, -0.04)
        a1, _ = policy.act(s)
        a2, _ = policy.act(mirrored)
        assert a1.value == pytest.approx(-a2.value, abs=1e-8)

    def test_act_is_pure(self, default_track, params):
        spec = OcpSpec(variant=Variant.WEIGHTS, horizon=7)
        policy = MpcPolicy(spec, MpcParams.zeros(Variant.WEIGHTS),
                           default_track, params)
        s = VehicleState(0.0, 0.0, 220.0, 0.3, 0.0)
        v1 = policy.act(s)[0].value
        v2 = policy.act(s)[0].value
        assert v1 == v2


class TestHierarchicalPolicy:
    def test_positive_setpoint_steers_left(self, straight_track, params):
        # force g to output (dbar=0.5, phibar=0): from the centerline the
        # controller must steer toward positive d
        spec = OcpSpec(variant=Variant.SETPOINT_ANGLE, horizon=10)
        net = setpoint_net(zero=True)
        policy = HierarchicalPolicy(net, spec,
                                    MpcParams.zeros(Variant.SETPOINT_ANGLE),
                                    straight_track, params)
        raw_needed = np.arctanh(0.5 / policy.d_limit) * policy.d_limit
        policy.mlp.biases[-1] = np.array([raw_needed, 0.0])
        (dbar, phibar), _, _ = policy.setpoints(VehicleState())
        assert dbar == pytest.approx(0.5, abs=1e-12)
        assert phibar == 0.0
        control, aux = policy.act(VehicleState())
        assert control.value > 0.0
        assert control.mode == "delta"

    def test_grid_oracle_confirms_sign(self, straight_track, params):
        # brute-force over constant steering: best feasible constant control
        # for chasing dbar=0.5 is positive, matching the policy's sign
        spec = OcpSpec(variant=Variant.SETPOINT_ANGLE, horizon=10)
        target = MpcParams(Variant.SETPOINT_ANGLE, np.array([0.5, 0.0]))
        model = BicycleModel(straight_track, params, 0.1, False)
        best_delta, best_cost = None, np.inf
        for delta in np.linspace(-0.6, 0.6, 121):
            x = np.zeros(5)
            cost = 0.0
            for _ in range(spec.horizon):
                cost += stage_cost(x, np.array([delta]), target)
                x = model.step(x, np.array([delta]))
            if cost < best_cost:
                best_cost, best_delta = cost, delta
        assert best_delta > 0.0

    def test_setpoints_clamped_into_lane(self, straight_track, params):
        spec = OcpSpec(variant=Variant.SETPOINT_RATE, horizon=7)
        net = setpoint_net(seed=2)
        unflatten_params(net, 10.0 * np.ones(net.n_params))
        policy = HierarchicalPolicy(net, spec,
                                    MpcParams.zeros(Variant.SETPOINT_RATE),
                                    straight_track, params)
        (dbar, phibar), _, _ = policy.setpoints(VehicleState(d=1.0))
        assert abs(dbar) <= spec.lane_half_width
        assert abs(phibar) <= 0.3

    def test_rate_variant_routes_extra_theta(self, straight_track, params):
        spec = OcpSpec(variant=Variant.SETPOINT_RATE, horizon=7)
        policy = HierarchicalPolicy(setpoint_net(seed=3), spec,
                                    MpcParams.zeros(Variant.SETPOINT_RATE),
                                    straight_track, params)
        state = VehicleState(0.0, 0.0, 10.0, 0.2, 0.0, delta=0.0)
        _, ctx = policy.act_training(state)
        result = policy.backprop(ctx, 1.0)
        assert result.theta_grad is not None and result.theta_grad.shape == (1,)
        assert result.net_grad is not None

    def test_weights_variant_rejected(self, straight_track, params):
        with pytest.raises(ValueError):
            HierarchicalPolicy(setpoint_net(),
                               OcpSpec(variant=Variant.WEIGHTS, horizon=7),
                               MpcParams.zeros(Variant.WEIGHTS),
                               straight_track, params)


class TestBundleIO:
    def test_nn_roundtrip(self, tmp_path, straight_track, params):
        policy = NnPolicy(steering_net(seed=1), straight_track)
        save_policy(policy, tmp_path / "bundle")
        loaded = load_policy(tmp_path / "bundle", straight_track, params)
        s = VehicleState(d=0.3, phi=0.02)
        assert loaded.act(s)[0].value == policy.act(s)[0].value

    def test_mpc_roundtrip(self, tmp_path, default_track, params):
        spec = OcpSpec(variant=Variant.WEIGHTS, horizon=7, d_la=9.72)
        theta = MpcParams(Variant.WEIGHTS, np.array([0.1, -0.2, 0.3, -0.4]))
        policy = MpcPolicy(spec, theta, default_track, params)
        save_policy(policy, tmp_path / "bundle")
        loaded = load_policy(tmp_path / "bundle", default_track, params)
        assert loaded.spec.horizon == 7
        assert np.array_equal(loaded.params.values, theta.values)

    def test_hierarchical_roundtrip(self, tmp_path, default_track, params):
        spec = OcpSpec(variant=Variant.SETPOINT_RATE, horizon=22, d_la=30.0)
        policy = HierarchicalPolicy(setpoint_net(seed=4), spec,
                                    MpcParams(Variant.SETPOINT_RATE,
                                              np.array([0.0, 0.0, 0.5])),
                                    default_track, params)
        save_policy(policy, tmp_path / "bundle")
        loaded = load_policy(tmp_path / "bundle", default_track, params)
        assert loaded.kind == "nn_mpc"
        assert loaded.base_params.values[2] == 0.5
        assert np.array_equal(flatten_params(loaded.mlp),
                              flatten_params(policy.mlp))
