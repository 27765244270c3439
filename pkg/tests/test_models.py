import numpy as np
import pytest

from glaucoma_oct import models
from glaucoma_oct.errors import (
    ConfigurationError,
    DimensionError,
    MissingTensorError,
    TensorShapeError,
    UnexpectedTensorError,
)
from glaucoma_oct.tensor import seeded_rng

SCRATCH_SHAPES = [
    ("input", (496, 768, 1)),
    ("conv1_1", (496, 768, 32)),
    ("pool1", (248, 384, 32)),
    ("conv2_1", (248, 384, 64)),
    ("pool2", (124, 192, 64)),
    ("conv3_1", (124, 192, 128)),
    ("pool3", (62, 96, 128)),
    ("conv4_1", (62, 96, 256)),
    ("gmp", (256,)),
    ("dense", (2,)),
]


def conv_param_count(cins, couts):
    return sum((3 * 3 * ci + 1) * co for ci, co in zip(cins, couts))


def test_scratch_shape_table():
    assert models.build_scratch_cnn().shape_table() == SCRATCH_SHAPES


def test_scratch_parameter_count():
    expected = conv_param_count([1, 32, 64, 128], [32, 64, 128, 256]) + (256 + 1) * 2
    assert expected == 388_354
    spec = models.build_scratch_cnn()
    assert spec.parameter_count() == spec.parameter_count(trainable_only=True) == 388_354


def test_scratch_reduced_premap():
    spec = models.build_scratch_cnn((124, 192, 1))
    table = dict(spec.shape_table())
    assert table["conv4_1"] == (15, 24, 256)


def test_scratch_width_divisor():
    spec = models.build_scratch_cnn((124, 192, 1), width_divisor=4)
    assert [l.out_channels for l in spec.param_layers] == [8, 16, 32, 64, 2]


def test_scratch_too_small():
    with pytest.raises(ConfigurationError):
        models.build_scratch_cnn((6, 64, 1))


def test_vgg16_base_parameter_count():
    spec = models.build_vgg(16)
    convs = [l for l in spec.param_layers if l.kind == "conv"]
    assert len(convs) == 13
    cins = [l.in_channels for l in convs]
    couts = [l.out_channels for l in convs]
    assert cins == [3, 64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512]
    assert conv_param_count(cins, couts) == 14_714_688
    assert spec.parameter_count() == 14_714_688 + 512 * 2 + 2


def test_vgg19_has_three_more_convs():
    n16 = sum(l.kind == "conv" for l in models.build_vgg(16).layers)
    n19 = sum(l.kind == "conv" for l in models.build_vgg(19).layers)
    assert (n16, n19) == (13, 16)


@pytest.mark.parametrize("variant", [16, 19])
def test_vgg_freezing_mask(variant):
    spec = models.build_vgg(variant)
    state = models.init_state(models.build_vgg(variant, (32, 32, 3), width_divisor=16), seeded_rng(0))
    frozen = {l.name for l in spec.param_layers if not spec.default_trainable(l)}
    assert frozen == {l.name for l in spec.param_layers if l.kind == "conv" and l.block <= 3}
    assert all(spec.default_trainable(l) for l in spec.param_layers if l.block >= 4 or l.kind == "dense")
    assert {k for k, v in state.trainable.items() if not v} == {
        l.name for l in state.spec.param_layers if l.kind == "conv" and l.block <= 3
    }


def test_vgg_head_and_shapes():
    spec = models.build_vgg(16)
    kinds = [l.kind for l in spec.layers[-3:]]
    assert kinds == ["gmp", "dropout", "dense"] and spec.layers[-2].rate == 0.4
    table = dict(spec.shape_table())
    assert table["block5_pool"] == (7, 12, 512)


def test_vgg_errors():
    with pytest.raises(ConfigurationError):
        models.build_vgg(17)
    with pytest.raises(ConfigurationError):
        models.build_vgg(16, (248, 384, 1))


def small_scratch(seed=0):
    return models.init_state(models.build_scratch_cnn((16, 24, 1), width_divisor=8), seeded_rng(seed))


def test_forward_zero_weights_uniform_output():
    st = small_scratch()
    for p in st.params.values():
        p.kernel[...] = 0
        p.bias[...] = 0
    probs, _ = models.forward(st, np.random.default_rng(0).random((16, 24, 1)))
    np.testing.assert_array_equal(probs, [0.5, 0.5])


def test_forward_probability_vector_and_cache():
    st = small_scratch()
    x = seeded_rng(1).random((16, 24, 1)).astype(np.float32)
    probs, cache = models.forward(st, x)
    assert probs.shape == (2,) and abs(probs.sum() - 1) < 1e-6
    assert cache.features.shape == (1, 2, 3, 32)


def test_forward_full_scratch_input():
    spec = models.build_scratch_cnn()
    st = models.init_state(spec, seeded_rng(0))
    probs, cache = models.forward(st, np.zeros((496, 768, 1), np.float32))
    assert probs.shape == (2,)
    assert cache.features.shape[1:] == (62, 96, 256)


def test_forward_eval_deterministic():
    st = models.init_state(models.build_vgg(16, (32, 32, 3), width_divisor=16), seeded_rng(2))
    x = seeded_rng(3).random((32, 32, 3)).astype(np.float32)
    a, _ = models.forward(st, x)
    b, _ = models.forward(st, x)
    np.testing.assert_array_equal(a, b)


def test_forward_shape_mismatch():
    with pytest.raises(DimensionError):
        models.forward(small_scratch(), np.zeros((16, 16, 1)))


def test_model_backward_matches_finite_differences():
    from glaucoma_oct.layers import LayerParams

    from .oracles import central_difference, rel_error

    spec = models.build_scratch_cnn((8, 8, 1), width_divisor=16)
    st = models.init_state(spec, seeded_rng(4))
    st.params = {k: LayerParams(p.kernel.astype(np.float64), p.bias.astype(np.float64)) for k, p in st.params.items()}
    x = seeded_rng(5).random((8, 8, 1))
    w = np.array([0.3, -1.1])

    def loss():
        _, cache = models.forward(st, x.astype(np.float64))
        return float((cache.logits[0] * w).sum())

    _, cache = models.forward(st, x)
    grads = models.backward(st, cache, w)
    for name in ("conv1_1", "conv4_1", "dense"):
        num = central_difference(loss, st.params[name].kernel)
        assert rel_error(grads[name].d_kernel, num) < 1e-3


def test_weights_round_trip_bitwise():
    st = small_scratch(7)
    back = models.load_weights(st.spec, models.save_weights(st), strict=True)
    for name, p in st.params.items():
        assert back.params[name].kernel.tobytes() == p.kernel.tobytes()
        assert back.params[name].bias.tobytes() == p.bias.tobytes()


def test_non_strict_missing_head_is_initialised():
    st = small_scratch(7)
    arch = models.save_weights(st)
    del arch["dense/kernel"], arch["dense/bias"]
    with pytest.raises(MissingTensorError):
        models.load_weights(st.spec, arch, strict=True)
    back = models.load_weights(st.spec, arch, strict=False, rng=seeded_rng(1))
    np.testing.assert_array_equal(back.params["conv1_1"].kernel, st.params["conv1_1"].kernel)
    assert back.params["dense"].kernel.shape == st.params["dense"].kernel.shape
    assert not np.array_equal(back.params["dense"].kernel, st.params["dense"].kernel)


def test_non_strict_missing_base_still_fails():
    st = small_scratch(7)
    arch = models.save_weights(st)
    del arch["conv2_1/kernel"]
    with pytest.raises(MissingTensorError):
        models.load_weights(st.spec, arch, strict=False, rng=seeded_rng(1))


def test_first_conv_shape_checked_against_spec():
    vgg = models.build_vgg(16, (32, 32, 3), width_divisor=1)
    arch = models.save_weights(models.init_state(vgg, seeded_rng(0)))
    assert arch["block1_conv1/kernel"].shape == (3, 3, 3, 64)
    models.load_weights(vgg, arch, strict=True)
    scratch = models.build_scratch_cnn()
    bad = models.save_weights(models.init_state(scratch, seeded_rng(0)))
    bad["conv1_1/kernel"] = arch["block1_conv1/kernel"]
    with pytest.raises(TensorShapeError, match=r"\(3, 3, 1, 32\)"):
        models.load_weights(scratch, bad, strict=True)


def test_strict_rejects_unexpected():
    st = small_scratch()
    arch = models.save_weights(st)
    arch["fc1/kernel"] = np.zeros((2, 2), np.float32)
    with pytest.raises(UnexpectedTensorError):
        models.load_weights(st.spec, arch, strict=True)
    models.load_weights(st.spec, arch, strict=False)
