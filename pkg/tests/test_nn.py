import numpy as np
import pytest

from admkd import tensor as T
from admkd.nn import (
    Adapter,
    AdapterError,
    InputError,
    ModelSpec,
    PairingError,
    SpecError,
    adapt,
    build_adapters,
    build_model,
    check_pairing,
    preset_spec,
)
from admkd.tensor import Tensor


def checksum(model):
    return T.parameters_checksum(model.parameters().values())


class TestModelSpec:
    def test_rejects_empty_widths(self):
        with pytest.raises(SpecError):
            ModelSpec("m", [], 1, (1, 8, 8), 2)

    def test_rejects_non_positive(self):
        with pytest.raises(SpecError):
            ModelSpec("m", [4, 0], 1, (1, 8, 8), 2)

    def test_rejects_odd_downsampling(self):
        with pytest.raises(SpecError, match="even"):
            ModelSpec("m", [4, 4], 1, (1, 7, 7), 2)

    def test_tap_shapes(self):
        assert preset_spec("tiny-b", (1, 16, 16), 4).tap_shapes() == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]

    def test_presets(self):
        a, b = preset_spec("tiny-a"), preset_spec("tiny-b")
        assert a.stage_widths == [32, 64, 128] and a.blocks_per_stage == 2
        assert b.stage_widths == [16, 32, 64] and b.blocks_per_stage == 1
        with pytest.raises(SpecError):
            preset_spec("resnet")

    def test_dict_roundtrip(self):
        spec = preset_spec("tiny-a", (1, 16, 16), 4, "t")
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestBuildModel:
    def test_same_seed_same_parameters(self):
        spec = preset_spec("tiny-b", (1, 16, 16), 4)
        assert checksum(build_model(spec, 3)) == checksum(build_model(spec, 3))
        assert checksum(build_model(spec, 3)) != checksum(build_model(spec, 4))

    def test_zero_input_gives_bias(self):
        spec = ModelSpec("m", [4], 1, (1, 8, 8), 2)
        model = build_model(spec, 0)
        model.head.bias.data[...] = [0.25, -0.5]
        _, logits = model.forward(Tensor(np.zeros((3, 1, 8, 8), np.float32)), train=False)
        np.testing.assert_array_equal(logits.data, np.tile([0.25, -0.5], (3, 1)))

    def test_zero_initialized_biases(self):
        model = build_model(ModelSpec("m", [4], 1, (1, 8, 8), 2), 0)
        assert not model.head.bias.data.any()
        bn = model.blocks[0][0][1]
        assert (bn.gamma.data == 1).all() and not bn.beta.data.any()

    @pytest.mark.parametrize("spec", [
        ModelSpec("a", [3], 1, (1, 4, 4), 2),
        ModelSpec("b", [4, 6, 8], 2, (3, 16, 16), 5),
        ModelSpec("c", [4, 6], 1, (2, 8, 8), 3, norm="none", classifier_bias=False),
    ])
    def test_parameter_count(self, spec):
        # hand count: first block of later stages is a 2x2 conv, the rest 3x3
        expected = 0
        c_in = spec.input_shape[0]
        for s, width in enumerate(spec.stage_widths):
            for b in range(spec.blocks_per_stage):
                k = 2 if (s > 0 and b == 0) else 3
                expected += width * c_in * k * k
                expected += 2 * width if spec.norm == "batchnorm" else width
                c_in = width
        expected += spec.num_classes * c_in + (spec.num_classes if spec.classifier_bias else 0)
        model = build_model(spec, 0)
        assert spec.parameter_count() == expected == model.parameter_count()


class TestForward:
    def test_identical_samples_identical_rows(self, rng):
        model = build_model(preset_spec("tiny-b", (1, 16, 16), 4), 0)
        x = np.repeat(rng.random((1, 1, 16, 16), dtype=np.float32), 3, axis=0)
        _, logits = model.forward(Tensor(x), train=False)
        assert (logits.data == logits.data[0]).all()

    def test_head_consistency(self, rng):
        model = build_model(preset_spec("tiny-b", (1, 16, 16), 4), 0)
        feats, logits = model.forward(Tensor(rng.random((2, 1, 16, 16), dtype=np.float32)), train=True)
        again = T.matmul(T.gap(feats[-1]), T.transpose(model.head.weight)) + model.head.bias
        np.testing.assert_array_equal(again.data, logits.data)

    def test_taps_are_post_activation(self, rng):
        model = build_model(preset_spec("tiny-b", (1, 16, 16), 4), 0)
        feats, _ = model.forward(Tensor(rng.random((2, 1, 16, 16), dtype=np.float32)), train=True)
        assert [f.shape[1:] for f in feats] == model.spec.tap_shapes()
        assert all((f.data >= 0).all() for f in feats)

    def test_hand_computed_forward(self):
        spec = ModelSpec("m", [1], 1, (1, 2, 2), 1, norm="none")
        model = build_model(spec, 0)
        k = np.zeros((1, 1, 3, 3), np.float32)
        k[0, 0, 1, 1] = 2.0
        k[0, 0, 1, 2] = 1.0
        model.blocks[0][0][0].weight.data = k
        model.blocks[0][0][0].bias.data = np.array([-1.0], np.float32)
        model.head.weight.data = np.array([[3.0]], np.float32)
        model.head.bias.data = np.array([0.5], np.float32)
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32)
        # conv: 2*x[i,j] + x[i,j+1] - 1 -> [[3, 3], [9, 7]]; relu keeps all; gap = 5.5
        _, logits = model.forward(Tensor(x))
        assert logits.data.item() == pytest.approx(3.0 * 5.5 + 0.5)

    def test_input_shape_mismatch(self):
        model = build_model(ModelSpec("m", [4], 1, (1, 8, 8), 2), 0)
        with pytest.raises(InputError):
            model.forward(Tensor(np.zeros((1, 1, 6, 6), np.float32)))

    def test_eval_forward_is_pure(self, rng):
        model = build_model(preset_spec("tiny-b", (1, 16, 16), 4), 0)
        x = Tensor(rng.random((2, 1, 16, 16), dtype=np.float32))
        assert model.forward(x)[1].data.tobytes() == model.forward(x)[1].data.tobytes()

    def test_train_mode_updates_running_stats(self, rng):
        model = build_model(ModelSpec("m", [4], 1, (1, 8, 8), 2), 0)
        before = model.buffers()["stage0.block0.bn.running_mean"].copy()
        model.forward(Tensor(rng.random((4, 1, 8, 8), dtype=np.float32) + 1), train=True)
        assert not np.array_equal(before, model.buffers()["stage0.block0.bn.running_mean"])


class TestAdapter:
    def test_identity(self, rng):
        fs = Tensor(rng.normal(size=(2, 3, 4, 4)))
        np.testing.assert_allclose(adapt(Adapter.identity(3), fs).data, fs.data, rtol=1e-6)

    def test_zero_weights(self, rng):
        out = adapt(Adapter(3, 2, weight=np.zeros((2, 3))), Tensor(rng.normal(size=(1, 3, 2, 2))))
        assert not out.data.any()

    def test_channel_sum(self, rng):
        fs = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
        out = adapt(Adapter(2, 1, weight=np.ones((1, 2))), Tensor(fs))
        np.testing.assert_allclose(out.data[:, 0], fs.sum(axis=1), rtol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(AdapterError):
            adapt(Adapter(2, 4), Tensor(np.zeros((1, 3, 2, 2), np.float32)))

    def test_build_adapters_only_where_needed(self):
        t = ModelSpec("t", [4, 8], 1, (1, 8, 8), 2)
        s = ModelSpec("s", [4, 6], 1, (1, 8, 8), 2)
        adapters = build_adapters(t, s, 0)
        assert adapters[0] is None and (adapters[1].c_in, adapters[1].c_out) == (6, 8)

    def test_pairing_requires_equal_spatial_taps(self):
        t = ModelSpec("t", [4, 8], 1, (1, 8, 8), 2)
        s = ModelSpec("s", [4, 8, 8], 1, (1, 8, 8), 2)
        with pytest.raises(PairingError):
            check_pairing(t, s)
