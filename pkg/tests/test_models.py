import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hxbcos.autograd import ShapeError, Tensor
from hxbcos.models import (
    DESK_STRIDES,
    DESK_WIDTHS,
    ModelConfig,
    build_model,
    checkpoint_bytes,
    load_checkpoint,
    save_checkpoint,
)

SMALL = dict(stage_widths=(12, 12, 24), stage_strides=(1, 2, 1), image_size=16)


def small(variant="ph", n=3, **kw):
    channels = 8 if variant == "quaternion" else 6
    return build_model(ModelConfig(variant=variant, n=n, input_channels=channels, **{**SMALL, **kw}))


def rand_input(model, batch=2, seed=0, size=16):
    rng = np.random.default_rng(seed)
    return rng.random((batch, model.config.input_channels, size, size))


def test_zero_input_gives_zero_logits():
    model = small()
    out = model(Tensor(np.zeros((2, 6, 16, 16)))).data
    assert out.shape == (2, 4)
    assert not np.any(out)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 50.0))
def test_logits_are_positively_homogeneous(alpha):
    model = small(stage_widths=(6, 12), stage_strides=(1, 2))
    x = rand_input(model, 1, seed=3)
    base = model(Tensor(x)).data
    np.testing.assert_allclose(model(Tensor(alpha * x)).data, alpha * base, rtol=1e-9, atol=1e-12)


def test_batch_items_are_independent():
    model = small()
    x = rand_input(model, 3)
    together = model(Tensor(x)).data
    for i in range(3):
        np.testing.assert_allclose(model(Tensor(x[i:i + 1])).data[0], together[i], rtol=1e-12, atol=1e-15)


def test_same_seed_same_model():
    a, b = small(seed=4), small(seed=4)
    x = rand_input(a)
    np.testing.assert_array_equal(a(Tensor(x)).data, b(Tensor(x)).data)
    assert not np.array_equal(small(seed=5)(Tensor(x)).data, a(Tensor(x)).data)


@pytest.mark.parametrize("variant,n", [("real", 1), ("ph", 2), ("ph", 3), ("ph", 6), ("quaternion", 4)])
def test_every_variant_runs(variant, n):
    model = small(variant, n)
    logits = model(Tensor(rand_input(model))).data
    assert logits.shape == (2, 4) and np.all(np.isfinite(logits))


def test_indivisible_width_names_stage():
    with pytest.raises(ValueError, match="stage 1"):
        build_model(ModelConfig(n=3, stage_widths=(12, 10), stage_strides=(1, 1)))


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        ModelConfig(variant="octonion")


def test_wrong_input_channels_rejected():
    with pytest.raises(ShapeError):
        small()(Tensor(np.zeros((1, 3, 16, 16))))


def test_dense_connectivity_widens_head():
    plain, dense = small(), small(dense_connectivity=True)
    # stages 0 and 2 keep their resolution and concatenate their input
    assert plain.head.in_channels == 24
    assert dense.head.in_channels == 24 + 12
    assert dense.stages[1].in_channels == 6 + 12


def test_logit_scale_is_product_of_fan_ins():
    model = small(stage_widths=(6, 12), stage_strides=(1, 2))
    fan_ins = [6 * 9, 6 * 9, 12]
    assert model.logit_scale == pytest.approx(np.prod(fan_ins) ** 0.5, rel=1e-12)
    assert small(gain_exponent=0.0).logit_scale == 1.0


def test_trace_exposes_layer_outputs():
    model = small()
    logits, outputs, features = model.trace(Tensor(rand_input(model)))
    assert len(outputs) == len(model.layers)
    assert features is outputs[-2]
    np.testing.assert_allclose(outputs[-1].data.mean(axis=(2, 3)) * model.logit_scale, logits.data)


# parameter counts --------------------------------------------------------------------------


@pytest.mark.parametrize("n", [2, 3, 4, 6])
def test_desk_parameter_ratio(n):
    channels = 8 if n == 4 else 6
    real = build_model(ModelConfig(variant="real", input_channels=channels)).param_breakdown()
    ph = build_model(ModelConfig(variant="ph", n=n, input_channels=channels)).param_breakdown()
    # the 1x1 classifier is a plain real unit in every variant
    head = real["per_layer"][-1]["filters"]
    assert ph["per_layer"][-1]["filters"] == head
    assert (ph["filters"] - head) * n == real["filters"] - head
    assert abs(ph["total"] / (real["total"] / n) - 1) <= 0.03


# checkpoints ------------------------------------------------------------------------------------


def test_config_text_round_trip():
    cfg = ModelConfig(variant="quaternion", input_channels=8, dense_connectivity=True, b=1.5,
                      class_names=("a", "b", "c", "d"), gain_exponent=0.25)
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    assert ModelConfig.from_text(ModelConfig().to_text()) == ModelConfig()
    assert ModelConfig().stage_widths == DESK_WIDTHS and ModelConfig().stage_strides == DESK_STRIDES


def test_checkpoint_round_trip_is_exact(tmp_path):
    model = small(class_names=("w", "x", "y", "z"))
    for p in model.parameters().values():
        p.data = p.data + np.float32(0.01)
    save_checkpoint(model, tmp_path / "a.hxb")
    loaded = load_checkpoint(tmp_path / "a.hxb")
    save_checkpoint(loaded, tmp_path / "b.hxb")
    assert (tmp_path / "a.hxb").read_bytes() == (tmp_path / "b.hxb").read_bytes()
    assert loaded.config == model.config
    x = Tensor(rand_input(model))
    np.testing.assert_array_equal(loaded(x).data, model(x).data)


def test_checkpoint_layout_header():
    raw = checkpoint_bytes(small())
    assert raw[:4] == b"HXB1"
    assert int.from_bytes(raw[4:6], "little") == 1


def test_corrupt_checkpoints_rejected(tmp_path):
    path = tmp_path / "bad.hxb"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(ValueError, match="HXB1"):
        load_checkpoint(path)
    raw = checkpoint_bytes(small())
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)
