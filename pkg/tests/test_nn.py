from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppg_uq import nn
from ppg_uq import tensor as T
from ppg_uq.checkpoint import load_checkpoint, read_container
from ppg_uq.rng import RngStream
from ppg_uq.tensor import Tensor, no_grad

DATA = Path(__file__).parent / "data"


def _classifier(rate=0.05, width=1.0, **kw):
    return nn.build_model(nn.ModelConfig("classification", dropout_rate=rate, width=width, **kw), RngStream(0, "init"))


def _resnet(rate=0.05, width=0.125, **kw):
    return nn.build_model(nn.ModelConfig("regression", dropout_rate=rate, width=width, **kw), RngStream(0, "init"))


def _shape_walk_classifier_params(length=800, maps=(128, 64, 32, 16, 1), kernel=8, outputs=4):
    """Independent count from the layer schedule: valid convs, pool 2/2, flatten, dense."""
    total, cin = 0, 1
    for cout in maps:
        total += cout * cin * kernel + cout
        length = (length - kernel + 1) // 2
        cin = cout
    return total + cin * length * outputs + outputs


class TestConvClassifier:
    def test_output_shape(self):
        m = _classifier(width=0.25)
        with no_grad():
            assert m(Tensor(np.zeros((3, 1, 800))), RngStream(0, "dropout")).shape == (3, 4)

    def test_parameter_count_matches_shape_walk(self):
        m = _classifier()
        count = sum(t.size for _, t in m.parameters())
        assert count == _shape_walk_classifier_params() == 87_485

    def test_zero_dropout_is_deterministic(self):
        m = _classifier(rate=0.0, width=0.25)
        x = Tensor(RngStream(1, "data").normal((2, 1, 800)))
        with no_grad():
            a = m(x, RngStream(1, "dropout")).data
            b = m(x, RngStream(2, "dropout")).data
        assert a.tobytes() == b.tobytes()

    def test_too_short_input_rejected_at_build(self):
        with pytest.raises(ValueError, match="too short"):
            _classifier(input_length=100)

    def test_wrong_input_shape_rejected(self):
        with pytest.raises(T.ShapeError):
            _classifier(width=0.25)(Tensor(np.zeros((1, 1, 700))))

    def test_dropout_sits_after_every_conv(self):
        m = _classifier(width=0.25)
        assert [type(d).__name__ for _, d in m.blocks] == ["Dropout"] * 5

    def test_golden_forward_pass(self):
        m = _classifier(width=0.25)
        m.load_state(load_checkpoint(DATA / "golden_classifier.ckpt"))
        golden = read_container(DATA / "golden_forward.bin")
        m.eval()
        with no_grad():
            out = m(Tensor(golden["input"])).data
        np.testing.assert_allclose(out, golden["logits"], rtol=1e-5, atol=1e-6)


class TestResNet:
    def test_output_shape_and_positivity(self):
        m = _resnet()
        with no_grad():
            out = m(Tensor(RngStream(0, "data").normal((2, 1, 1250))), RngStream(0, "dropout")).data
        assert out.shape == (2, 4)
        assert np.all(out > 0)

    def test_eval_mode_without_dropout_is_deterministic(self):
        m = _resnet(rate=0.0)
        m.eval()
        x = Tensor(RngStream(3, "data").normal((2, 1, 1250)))
        with no_grad():
            assert m(x).data.tobytes() == m(x).data.tobytes()

    def test_zero_block_weights_give_relu_of_skip(self):
        cfg = nn.ModelConfig("regression", dropout_rate=0.0, width=0.125)
        for cin, cout in [(8, 8), (8, 16)]:
            block = nn.ResidualBlock(cin, cout, cfg, RngStream(0, "init"))
            for name, t in block.parameters():
                if name.startswith(("conv1", "conv2")):
                    t.data[...] = 0.0
            x = Tensor(RngStream(5, "data").normal((2, cin, 20)))
            with no_grad():
                out = block(x).data
                skip = x.data[:, :, ::2] if block.down is None else block.down(x).data
            np.testing.assert_allclose(out, np.maximum(skip, 0.0), atol=1e-6)

    def test_output_scale_multiplies_heads(self):
        x = Tensor(RngStream(0, "data").normal((1, 1, 1250)))
        a, b = _resnet(rate=0.0), _resnet(rate=0.0, output_scale=100.0)
        a.eval(), b.eval()
        with no_grad():
            np.testing.assert_allclose(b(x).data, 100.0 * a(x).data, rtol=1e-5)

    def test_block_schedule(self):
        m = _resnet(width=1.0)
        outs = [b.conv2.weight.shape[0] for b in m.blocks]
        assert outs == [64, 64, 128, 128, 256, 256, 1, 1]
        assert m.stem.weight.shape == (64, 1, 7) and m.stem.stride == 2
        assert all(b.conv1.kernel == 9 for b in m.blocks)

    def test_batchnorm_running_stats_update_only_in_training(self):
        m = _resnet(rate=0.0)
        x = Tensor(RngStream(0, "data").normal((4, 1, 1250)) + 3.0)
        before = m.stem_bn.running_mean.data.copy()
        m.eval()
        with no_grad():
            m(x)
        np.testing.assert_array_equal(m.stem_bn.running_mean.data, before)
        m.train()
        with no_grad():
            m(x)
        assert not np.array_equal(m.stem_bn.running_mean.data, before)


class TestParamSet:
    def test_names_unique_and_order_stable(self):
        a = _classifier(width=0.25).parameters().names()
        b = _classifier(width=0.25).parameters().names()
        assert a == b and len(set(a)) == len(a)

    def test_state_includes_batchnorm_buffers(self):
        m = _resnet()
        extra = set(m.state().names()) - set(m.parameters().names())
        assert extra and all("running" in n for n in extra)

    def test_head_count_fixed_at_four(self):
        with pytest.raises(ValueError):
            nn.ModelConfig("classification", head_count=3)


class TestShapeContract:
    @settings(max_examples=5, deadline=None)
    @given(st.integers(1, 4))
    def test_any_batch_size(self, batch):
        m = _classifier(width=0.125).eval()
        with no_grad():
            assert m(Tensor(np.zeros((batch, 1, 800)))).shape == (batch, 4)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-1e3, 1e3))
    def test_softplus_heads_positive(self, shift):
        m = _resnet(rate=0.0)
        m.eval()
        with no_grad():
            out = m(Tensor(np.full((1, 1, 1250), shift))).data
        assert np.all(out > 0) and np.all(np.isfinite(out))
