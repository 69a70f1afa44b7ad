import numpy as np
import pytest

from model_helpers import TINY, end_to_end_errors, tiny_problem
from flowrefine.errors import ConfigError, PaddingRequiredError, ShapeError
from flowrefine.model import FlowModel, ModelConfig, image_to_tensor, init_params, init_shapes
from flowrefine.flow_ops import pixel_grid, warp
from flowrefine.gradcheck import check_gradients
from flowrefine.ops import conv2d
from flowrefine.tensor import Tensor
from conftest import subpixel_coords


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"iterations": 0}, {"feature_channels": 0}, {"downsample_factor": 3}, {"correlation_radius": 0}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    def test_gru_input_channels(self):
        assert ModelConfig(correlation_radius=3, sci_enabled=True).gru_input_channels == 49 + 2 + 1
        assert ModelConfig(correlation_radius=1, sci_enabled=False).gru_input_channels == 9 + 2


class TestParameters:
    def test_default_count_under_budget(self):
        # frozen from the shape table at defaults
        assert FlowModel(ModelConfig()).num_parameters() == 63330
        assert FlowModel(ModelConfig(sci_enabled=False)).num_parameters() == 63330 - 3 * 48

    def test_shapes_match_table(self):
        cfg = ModelConfig(seed=3)
        params = init_params(cfg)
        assert {k: v.shape for k, v in params.items()} == init_shapes(cfg)

    def test_deterministic_init(self):
        a = init_params(ModelConfig(seed=4))
        b = init_params(ModelConfig(seed=4))
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)

    def test_seed_changes_weights(self):
        a = init_params(ModelConfig(seed=4))
        b = init_params(ModelConfig(seed=5))
        assert not np.array_equal(a["enc0.weight"].data, b["enc0.weight"].data)

    def test_baseline_and_sci_share_weights(self):
        base = init_params(ModelConfig(sci_enabled=False))
        sci = init_params(ModelConfig(sci_enabled=True))
        for k in base:
            if k == "gru.wx.weight":
                np.testing.assert_array_equal(sci[k].data[:, :-1], base[k].data)
            else:
                np.testing.assert_array_equal(sci[k].data, base[k].data)

    def test_rejects_wrong_shapes(self):
        cfg = ModelConfig()
        params = init_params(cfg)
        params["head1.bias"] = Tensor(np.zeros(3))
        with pytest.raises(ShapeError):
            FlowModel(cfg, params)

    def test_rejects_missing(self):
        cfg = ModelConfig()
        params = init_params(cfg)
        del params["gru.uq.weight"]
        with pytest.raises(ConfigError):
            FlowModel(cfg, params)


class TestForward:
    def test_trace_length_and_shapes(self):
        model, i1, i2, _ = tiny_problem()
        trace = model.estimate_flow(i1, i2)
        assert len(trace) == 2
        assert all(f.shape == (2, 2, 16, 16) for f in trace.flows)
        assert len(trace.sci_maps) == 2
        assert trace.sci_maps[0].map.shape == (2, 1, 8, 8)

    def test_iteration_override(self):
        model, i1, i2, _ = tiny_problem()
        assert len(model.estimate_flow(i1, i2, iterations=5)) == 5

    def test_baseline_has_no_sci_maps(self):
        model, i1, i2, _ = tiny_problem(sci=False)
        assert model.estimate_flow(i1, i2).sci_maps is None

    def test_sci_map_range(self):
        model, i1, i2, _ = tiny_problem()
        for m in model.estimate_flow(i1, i2).sci_maps:
            assert np.all((m.map.data >= 0) & (m.map.data <= 1))

    def test_requires_divisible_size(self):
        model = FlowModel(ModelConfig(**TINY))
        img = image_to_tensor(np.zeros((1, 15, 16, 3)))
        with pytest.raises(PaddingRequiredError) as exc:
            model.estimate_flow(img, img)
        assert exc.value.axis == 2

    def test_pair_shape_mismatch(self):
        model = FlowModel(ModelConfig(**TINY))
        with pytest.raises(ShapeError):
            model.estimate_flow(image_to_tensor(np.zeros((1, 16, 16, 3))), image_to_tensor(np.zeros((1, 16, 8, 3))))

    def test_refine_step_needs_detached_flow(self):
        model, i1, i2, _ = tiny_problem()
        f1, f2 = model.encode_features(i1), model.encode_features(i2)
        flow = Tensor(np.zeros((2, 2, 8, 8)), requires_grad=True)
        with pytest.raises(ValueError):
            model.refine_step(f1, f2, flow, model.init_hidden(f1))

    def test_deterministic_forward(self):
        model, i1, i2, _ = tiny_problem()
        a = model.estimate_flow(i1, i2).final.flow.data
        b = model.estimate_flow(i1, i2).final.flow.data
        assert a.tobytes() == b.tobytes()

    def test_float32_mode(self):
        model = FlowModel(ModelConfig(**TINY), dtype=np.float32)
        img = image_to_tensor(np.zeros((1, 16, 16, 3)), np.float32)
        assert model.estimate_flow(img, img).final.flow.dtype == np.float32


class TestImageToTensor:
    def test_uint8_range(self):
        t = image_to_tensor(np.array([[[0, 255, 128]]], dtype=np.uint8))
        assert t.shape == (1, 3, 1, 1)
        np.testing.assert_allclose(t.data.ravel(), [-1.0, 1.0, 128 / 255 * 2 - 1])

    def test_float_range(self):
        t = image_to_tensor(np.full((2, 2, 2, 3), 0.5))
        assert np.all(t.data == 0.0)

    def test_rejects_gray(self):
        with pytest.raises(ShapeError):
            image_to_tensor(np.zeros((4, 4)))


@pytest.mark.parametrize("sci", [True, False])
def test_end_to_end_gradients(sci):
    model, i1, i2, gt = tiny_problem(seed=1, sci=sci)
    errs = end_to_end_errors(model, i1, i2, gt, per_param=3)
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-3, (worst, errs[worst])


def test_encoder_weight_gradients_on_8x8(rng):
    model = FlowModel(ModelConfig(seed=2, **TINY), dtype=np.float64)
    img = image_to_tensor(rng.uniform(0, 1, (1, 8, 8, 3)), np.float64)
    feats = model.encode_features(img)
    w = Tensor(rng.normal(size=feats.shape))
    enc = [model.params[k] for k in sorted(model.params) if k.startswith("enc")]
    errs = check_gradients(lambda: (model.encode_features(img) * w).sum(), enc)
    assert max(errs) < 1e-3


def test_encoder_shape_and_determinism(rng):
    model = FlowModel(ModelConfig(seed=0), dtype=np.float64)
    img = image_to_tensor(rng.uniform(0, 1, (1, 32, 32, 3)), np.float64)
    a, b = model.encode_features(img), model.encode_features(img)
    assert a.shape == (1, 32, 8, 8)
    assert np.array_equal(a.data, b.data)


def test_composite_graph_gradients(rng):
    # conv -> nonlinearity -> warp -> sum, differentiated w.r.t. every input
    x = Tensor(rng.normal(size=(1, 2, 6, 7)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
    grid = pixel_grid(1, 6, 7, np.float64)
    target = np.concatenate([subpixel_coords(rng, (1, 1, 6, 7), 7), subpixel_coords(rng, (1, 1, 6, 7), 6)], 1)
    flow = Tensor(target - grid, requires_grad=True)
    errs = check_gradients(lambda: warp(conv2d(x, k, padding=1).tanh(), flow).sum(), [x, k, flow])
    assert max(errs) < 1e-3
