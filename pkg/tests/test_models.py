"""Predictor construction, the recurrent cell, fusion semantics, and checkpoints."""

import math

import numpy as np
import pytest

from emopose import autodiff as ad
from emopose.autodiff import Parameter, Tape, Tensor
from emopose.data import NormStats, WindowSample
from emopose.errors import ContractError, ShapeError
from emopose import models as M
from emopose.training import batch_mse


def make_sample(rng, obs=10, horizon=15):
    return WindowSample(
        x_pose=rng.standard_normal((obs, 66)),
        x_emotion=rng.standard_normal((obs, 20)),
        y_pose=rng.standard_normal((horizon, 66)),
    )


def zero_all(params):
    for p in params.parameters():
        p.data[...] = 0.0
    return params


class TestInit:
    def test_same_seed_bitwise(self):
        a = M.init_params("fusion", seed=5)
        b = M.init_params("fusion", seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_gate_presence_and_value(self):
        assert M.init_params("baseline", 0).gate is None
        assert M.init_params("fusion", 0).gate_value() == pytest.approx(0.1)
        assert M.init_params("world", 0).gate_value() == pytest.approx(0.1)

    def test_layer2_weight_range(self):
        p = M.init_params("fusion", seed=3)
        bound = 1.0 / math.sqrt(128)
        l2 = p.layers[1]
        assert np.max(np.abs(l2.W_x.data)) <= bound
        assert np.max(np.abs(l2.W_h.data)) <= bound

    def test_layer1_input_widths(self):
        assert M.init_params("baseline", 0).layers[0].d == 66
        assert M.init_params("fusion", 0).layers[0].d == 86
        assert M.init_params("world", 0).layers[0].d == 86

    def test_forget_gate_bias_one(self):
        p = M.init_params("world", 0)
        h = p.config.hidden
        for layer in p.layers:
            assert np.all(layer.b.data[h : 2 * h] == 1.0)
            assert np.all(layer.b.data[:h] == 0.0)

    def test_decoder_widths(self):
        assert M.init_params("fusion", 0).dec_W.shape == (15 * 66, 128)
        assert M.init_params("world", 0).dec_W.shape == (66, 128)

    def test_unknown_kind(self):
        with pytest.raises(ContractError, match="kind"):
            M.init_params("transformer", 0)


class TestFuse:
    def test_gate_zero_blanks_emotion(self):
        rng = np.random.default_rng(0)
        out = M.fuse(rng.standard_normal(66), rng.standard_normal(20), 0.0)
        assert out.shape == (86,)
        assert np.all(out.data[66:] == 0.0)

    def test_width_is_86(self):
        out = M.fuse(np.zeros((4, 66)), np.zeros((4, 20)), 0.5)
        assert out.shape == (4, 86)

    def test_scalar_associativity(self):
        rng = np.random.default_rng(1)
        p, e = rng.standard_normal(66), rng.standard_normal(20)
        a = M.fuse(p, e, 0.4)
        b = M.fuse(p, 2.0 * e, 0.2)
        assert np.max(np.abs(a.data - b.data)) < 1e-15

    def test_pose_passes_through_untouched(self):
        rng = np.random.default_rng(2)
        p = rng.standard_normal(66)
        out = M.fuse(p, rng.standard_normal(20), 0.7)
        assert np.array_equal(out.data[:66], p)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            M.fuse(np.zeros(65), np.zeros(20), 1.0)
        with pytest.raises(ShapeError):
            M.fuse(np.zeros(66), np.zeros(21), 1.0)


def cell_oracle(x, h_prev, c_prev, W_x, W_h, b, hidden):
    """Plain-python gate equations for one cell step."""

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    z = [
        sum(W_x[r][k] * x[k] for k in range(len(x)))
        + sum(W_h[r][k] * h_prev[k] for k in range(hidden))
        + b[r]
        for r in range(4 * hidden)
    ]
    h_new, c_new = [], []
    for j in range(hidden):
        i = sig(z[j])
        f = sig(z[hidden + j])
        g = math.tanh(z[2 * hidden + j])
        o = sig(z[3 * hidden + j])
        c = f * c_prev[j] + i * g
        c_new.append(c)
        h_new.append(o * math.tanh(c))
    return h_new, c_new


class TestLstmCell:
    def _layer(self, d, h, rng=None):
        if rng is None:
            W_x, W_h, b = np.zeros((4 * h, d)), np.zeros((4 * h, h)), np.zeros(4 * h)
        else:
            W_x = rng.standard_normal((4 * h, d))
            W_h = rng.standard_normal((4 * h, h))
            b = rng.standard_normal(4 * h)
        return M.LstmLayerParams(
            W_x=Parameter(W_x, "W_x"), W_h=Parameter(W_h, "W_h"), b=Parameter(b, "b"), d=d, h=h
        )

    def test_zero_weights_zero_state(self):
        layer = self._layer(3, 4)
        h, c = M.lstm_cell(np.ones(3), (Tensor(np.zeros(4)), Tensor(np.zeros(4))), layer)
        assert np.all(h.data == 0.0) and np.all(c.data == 0.0)

    def test_saturated_carry(self):
        # wide-open forget gate, closed input gate: the cell carries c through
        layer = self._layer(2, 3)
        layer.b.data[3:6] = 50.0  # forget
        layer.b.data[0:3] = -50.0  # input
        c_bar = np.array([0.3, -1.2, 2.0])
        h, c = M.lstm_cell(np.ones(2), (Tensor(np.zeros(3)), Tensor(c_bar)), layer)
        assert np.max(np.abs(c.data - c_bar)) < 1e-10

    def test_matches_hand_evaluated_equations(self):
        rng = np.random.default_rng(12)
        layer = self._layer(2, 2, rng)
        x = rng.standard_normal(2)
        h0 = rng.standard_normal(2)
        c0 = rng.standard_normal(2)
        h, c = M.lstm_cell(x, (Tensor(h0), Tensor(c0)), layer)
        eh, ec = cell_oracle(
            list(x), list(h0), list(c0), layer.W_x.data.tolist(), layer.W_h.data.tolist(),
            layer.b.data.tolist(), 2,
        )
        assert np.max(np.abs(h.data - eh)) < 1e-12
        assert np.max(np.abs(c.data - ec)) < 1e-12

    def test_gradients_match_central_differences(self):
        rng = np.random.default_rng(3)
        layer = self._layer(3, 4, rng)
        layer.W_x.data /= 2.0
        x = Parameter(rng.standard_normal((2, 3)), "x")
        h0 = Parameter(rng.standard_normal((2, 4)), "h0")
        c0 = Parameter(rng.standard_normal((2, 4)), "c0")
        params = [x, h0, c0, layer.W_x, layer.W_h, layer.b]
        weights = Tensor(rng.standard_normal((2, 8)))

        def loss():
            h, c = M.lstm_cell(x, (h0, c0), layer)
            return ad.sum_all(ad.mul(ad.concat_cols([h, c]), weights))

        with Tape():
            loss().backward()
        analytic = {p.name: p.grad.copy() for p in params}
        ad.zero_grads(params)
        fd = ad.fd_gradient(lambda: loss().item(), params)
        for name in fd:
            assert ad.relative_error(analytic[name], fd[name]) < 1e-4, name

    def test_width_mismatch(self):
        layer = self._layer(3, 4)
        with pytest.raises(ShapeError):
            M.lstm_cell(np.ones(5), (Tensor(np.zeros(4)), Tensor(np.zeros(4))), layer)


class TestEncodeWindow:
    def test_single_frame_equals_one_cell_step(self):
        rng = np.random.default_rng(4)
        params = M.init_params("baseline", 7, M.ModelConfig(obs_len=1, horizon=2, hidden=6))
        x = rng.standard_normal((1, 66))
        states = M.encode_window([x], params)
        h1, c1 = M.lstm_cell(x, (Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 6)))), params.layers[0])
        h2, c2 = M.lstm_cell(h1, (Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 6)))), params.layers[1])
        assert np.array_equal(states[0][0].data, h1.data)
        assert np.array_equal(states[0][1].data, c1.data)
        assert np.array_equal(states[1][0].data, h2.data)
        assert np.array_equal(states[1][1].data, c2.data)

    def test_order_sensitivity(self):
        rng = np.random.default_rng(5)
        params = M.init_params("baseline", 8, M.ModelConfig(obs_len=4, horizon=2, hidden=6))
        frames = [rng.standard_normal((1, 66)) for _ in range(4)]
        fwd = M.encode_window(frames, params)
        rev = M.encode_window(frames[::-1], params)
        assert not np.array_equal(fwd[1][0].data, rev[1][0].data)

    def test_zero_weights_zero_state(self):
        params = zero_all(M.init_params("baseline", 0, M.ModelConfig(hidden=5)))
        rng = np.random.default_rng(6)
        states = M.encode_window([rng.standard_normal((2, 66)) for _ in range(3)], params)
        for h, c in states:
            assert np.all(h.data == 0.0) and np.all(c.data == 0.0)

    def test_empty_window_rejected(self):
        params = M.init_params("baseline", 0)
        with pytest.raises(ContractError):
            M.encode_window([], params)


class TestPredictDirect:
    def test_output_shape_15x66(self):
        rng = np.random.default_rng(7)
        params = M.init_params("fusion", 1)
        out = M.predict_direct(params, make_sample(rng))
        assert out.shape == (15, 66)

    def test_zero_weights_yield_bias_rows(self):
        rng = np.random.default_rng(8)
        params = zero_all(M.init_params("baseline", 0))
        bias = rng.standard_normal(15 * 66)
        params.dec_b.data[...] = bias
        out = M.predict_direct(params, make_sample(rng))
        assert np.array_equal(out, bias.reshape(15, 66))

    def test_gate_zero_equals_pose_surgery_baseline(self):
        # drop the emotion columns of a gate-zero fusion model and the
        # remaining pose pathway is exactly the baseline
        rng = np.random.default_rng(9)
        fusion = M.init_params("fusion", 21)
        fusion.gate.data[...] = 0.0
        baseline = M.init_params("baseline", 33)
        baseline.layers[0].W_x.data[...] = fusion.layers[0].W_x.data[:, :66]
        baseline.layers[0].W_h.data[...] = fusion.layers[0].W_h.data
        baseline.layers[0].b.data[...] = fusion.layers[0].b.data
        for attr in ("W_x", "W_h", "b"):
            getattr(baseline.layers[1], attr).data[...] = getattr(fusion.layers[1], attr).data
        baseline.dec_W.data[...] = fusion.dec_W.data
        baseline.dec_b.data[...] = fusion.dec_b.data
        sample = make_sample(rng)
        assert np.allclose(
            M.predict_direct(fusion, sample), M.predict_direct(baseline, sample), atol=1e-12
        )

    def test_kind_contract(self):
        rng = np.random.default_rng(10)
        with pytest.raises(ContractError):
            M.predict_direct(M.init_params("world", 0), make_sample(rng))


class TestPredictRollout:
    def test_output_shape_and_step_count(self):
        rng = np.random.default_rng(11)
        params = M.init_params("world", 2)
        out = M.predict_rollout(params, make_sample(rng))
        assert out.shape == (15, 66)

    def test_horizon_one_manual_composition(self):
        rng = np.random.default_rng(12)
        cfg = M.ModelConfig(obs_len=5, horizon=1, hidden=8)
        params = M.init_params("world", 3, cfg)
        sample = make_sample(rng, obs=5, horizon=1)
        out = M.predict_rollout(params, sample)

        fused = [
            M.fuse(sample.x_pose[t][None, :], sample.x_emotion[t][None, :], params.gate)
            for t in range(5)
        ]
        states = M.encode_window(fused, params)
        step_in = M.fuse(sample.x_pose[-1][None, :], sample.x_emotion[-1][None, :], params.gate)
        h1, c1 = M.lstm_cell(step_in, states[0], params.layers[0])
        h2, c2 = M.lstm_cell(h1, states[1], params.layers[1])
        manual = h2.data @ params.dec_W.data.T + params.dec_b.data
        assert np.allclose(out, manual.reshape(1, 66), atol=1e-12)

    def test_zero_weights_yield_bias_rows(self):
        rng = np.random.default_rng(13)
        params = zero_all(M.init_params("world", 0))
        bias = rng.standard_normal(66)
        params.dec_b.data[...] = bias
        out = M.predict_rollout(params, make_sample(rng))
        assert np.array_equal(out, np.tile(bias, (15, 1)))

    def test_kind_contract(self):
        rng = np.random.default_rng(14)
        with pytest.raises(ContractError):
            M.predict_rollout(M.init_params("fusion", 0), make_sample(rng))

    def test_targets_never_affect_predictions(self):
        rng = np.random.default_rng(15)
        params = M.init_params("world", 4)
        sample = make_sample(rng)
        out1 = M.predict_rollout(params, sample)
        sample.y_pose[...] = rng.standard_normal(sample.y_pose.shape)
        out2 = M.predict_rollout(params, sample)
        assert out1.tobytes() == out2.tobytes()


class TestGateZeroInvariance:
    @pytest.mark.parametrize("kind", ["fusion", "world"])
    def test_emotion_replacement_changes_no_bit(self, kind):
        rng = np.random.default_rng(16)
        params = M.init_params(kind, 6)
        params.gate.data[...] = 0.0
        sample = make_sample(rng)
        predict = M.predict_direct if kind == "fusion" else M.predict_rollout
        out1 = predict(params, sample)
        sample.x_emotion[...] = 1e6 * rng.standard_normal(sample.x_emotion.shape)
        out2 = predict(params, sample)
        assert out1.tobytes() == out2.tobytes()


class TestGateGradient:
    @pytest.mark.parametrize("kind", ["fusion", "world"])
    def test_gate_gradient_matches_central_differences(self, kind):
        rng = np.random.default_rng(17)
        cfg = M.ModelConfig(obs_len=4, horizon=3, hidden=8)
        params = M.init_params(kind, 18, cfg)
        xp = rng.standard_normal((2, 4, 66))
        xe = rng.standard_normal((2, 4, 20))
        base = M.forward_windows(params, xp, xe).data.reshape(2, 3, 66)
        y = base + 0.01 * rng.standard_normal(base.shape)
        with Tape():
            batch_mse(M.forward_windows(params, xp, xe), y).backward()
        analytic = params.gate.grad.copy()
        assert np.any(analytic != 0.0)  # the gate is trained, not frozen
        ad.zero_grads(params.parameters())
        fd = ad.fd_gradient(
            lambda: batch_mse(M.forward_windows(params, xp, xe), y).item(), [params.gate]
        )
        assert ad.relative_error(analytic, fd["gate.lambda"]) < 1e-4


def test_prediction_determinism():
    rng = np.random.default_rng(19)
    params = M.init_params("fusion", 20)
    sample = make_sample(rng)
    assert M.predict_direct(params, sample).tobytes() == M.predict_direct(params, sample).tobytes()


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = M.init_params("world", 9)
        stats = NormStats.identity()
        stats.pose_mean[:] = np.random.default_rng(1).standard_normal(66)
        path = tmp_path / "model.json"
        M.save_checkpoint(params, stats, path, split={"ratios": [0.7, 0.15, 0.15], "gap": 24})
        ck = M.load_checkpoint(path)
        assert ck.params.kind == "world"
        assert ck.split == {"ratios": [0.7, 0.15, 0.15], "gap": 24}
        for a, b in zip(params.parameters(), ck.params.parameters()):
            assert a.name == b.name
            assert a.data.tobytes() == b.data.tobytes()
        assert ck.stats.pose_mean.tobytes() == stats.pose_mean.tobytes()

    def test_missing_parameter_rejected(self, tmp_path):
        import json

        params = M.init_params("fusion", 0)
        path = tmp_path / "model.json"
        M.save_checkpoint(params, None, path)
        payload = json.loads(path.read_text())
        del payload["params"]["gate.lambda"]
        path.write_text(json.dumps(payload))
        with pytest.raises(ContractError, match="gate.lambda"):
            M.load_checkpoint(path)

    def test_wrong_shape_rejected(self, tmp_path):
        import json

        params = M.init_params("baseline", 0)
        path = tmp_path / "model.json"
        M.save_checkpoint(params, None, path)
        payload = json.loads(path.read_text())
        payload["params"]["decoder.b"]["shape"] = [3]
        payload["params"]["decoder.b"]["values"] = [0.0, 0.0, 0.0]
        path.write_text(json.dumps(payload))
        with pytest.raises(ShapeError):
            M.load_checkpoint(path)
