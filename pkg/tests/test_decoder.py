import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segkit import backbone as bb
from segkit import decoder as dec
from segkit import gradcheck as G
from segkit import tensor as T
from segkit.model import SegRet
from segkit.tensor import ShapeError, Tensor


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def test_config_invariants():
    for kw in ({"C": 0}, {"n_cls": 1}, {"variant": "sideways"}):
        with pytest.raises(ValueError):
            dec.DecoderConfig(**kw)
    assert dec.DecoderConfig().variant == "literal"


def test_linear_project_examples():
    f = t(np.random.default_rng(0).normal(size=(2, 3, 3)))
    zero = {"lin0.w": t(np.zeros((4, 2))), "lin0.b": t(np.zeros(4))}
    assert np.array_equal(dec.linear_project(f, zero, 0).data, np.zeros((4, 3, 3)))
    ident = {"lin0.w": t(np.eye(2)), "lin0.b": t(np.zeros(2))}
    assert np.array_equal(dec.linear_project(f, ident, 0).data, f.data)
    hand = {"lin0.w": t([[1, 0], [0, 1], [1, 1]]), "lin0.b": t(np.zeros(3))}
    assert dec.linear_project(t(np.array([2.0, 3.0]).reshape(2, 1, 1)), hand, 0).data.ravel().tolist() == [2, 3, 5]
    with pytest.raises(ShapeError):
        dec.linear_project(t(np.zeros((3, 1, 1))), hand, 0)


def test_zir_residual_examples():
    cfg = dec.DecoderConfig(C=1, n_cls=2)
    p = {"zir0.w": t([[1.0]]), "zir0.b": t([0.0])}
    out = dec.zir_residual(t([[[2.0]]]), t([[[3.0]]]), p, cfg, 0)
    assert out.data.tolist() == [[[5.0]]]

    r = np.random.default_rng(1)
    f, F = t(r.normal(size=(3, 2, 2))), t(r.normal(size=(4, 2, 2)))
    lit = dec.init_params(dec.DecoderConfig(C=4, n_cls=2), [3], rng=0, dtype="f64")
    assert np.array_equal(dec.zir_residual(f, F, lit, dec.DecoderConfig(C=4, n_cls=2), 0).data, f.data)
    pcfg = dec.DecoderConfig(C=4, n_cls=2, variant="projected")
    proj = dec.init_params(pcfg, [3], rng=0, dtype="f64")
    assert np.array_equal(dec.zir_residual(f, F, proj, pcfg, 0).data, F.data)
    off = dec.DecoderConfig(C=4, n_cls=2, zir_enabled=False)
    assert dec.zir_residual(f, F, {}, off, 0) is f
    with pytest.raises(ShapeError):
        dec.zir_residual(f, t(np.zeros((4, 3, 2))), lit, dec.DecoderConfig(C=4, n_cls=2), 0)


def test_upsample_quarter_examples():
    x = t(np.random.default_rng(2).normal(size=(3, 16, 16)))
    assert dec.upsample_quarter(x, 64, 64) is x
    assert np.all(dec.upsample_quarter(t(np.full((2, 2, 2), 0.7)), 64, 64).data == 0.7)
    assert dec.upsample_quarter(t(np.zeros((5, 2, 2))), 64, 64).shape == (5, 16, 16)
    with pytest.raises(ShapeError):
        dec.upsample_quarter(x, 62, 64)


def test_fuse_concat_order_and_widths():
    r = np.random.default_rng(3)
    feats = [t(r.normal(size=(c, 4, 4))) for c in (64, 128, 256, 512)]
    m = dec.fuse_concat(feats)
    assert m.shape[0] == 960
    assert np.array_equal(m.data[:64], feats[0].data)
    assert dec.fused_channels(dec.DecoderConfig(C=256, variant="projected"), [64, 128, 256, 512]) == 1024
    with pytest.raises(ShapeError):
        dec.fuse_concat([t(np.zeros((1, 4, 4))), t(np.zeros((1, 2, 4)))])


def test_classify_zero_weights_give_bias():
    p = {"cls.w": t(np.zeros((3, 6))), "cls.b": t([0.5, -1.0, 2.0])}
    out = dec.classify(t(np.random.default_rng(4).normal(size=(6, 4, 5))), p, 16, 20).data
    assert out.shape == (3, 16, 20)
    assert np.allclose(out, np.array([0.5, -1.0, 2.0])[:, None, None], atol=1e-15)


def test_decoder_gradients():
    names = {"zir_literal", "zir_projected", "decoder_upsample", "decoder_classify", "linear", "pointwise_conv"}
    for r in G.run_op_suite("f64", seed=2):
        if r.name in names:
            assert r.max_rel_error < 1e-5, r.line()


@pytest.mark.parametrize("variant", dec.VARIANTS)
def test_zero_init_bitwise_identity_then_divergence(variant):
    bcfg = bb.BackboneConfig([8, 8, 16, 16], [1, 0, 0, 1], [1, 1, 2, 2], ffn_ratio=2)
    on = dec.DecoderConfig(C=8, n_cls=3, variant=variant)
    model = SegRet.create(bcfg, on, seed=0, dtype="f64")
    img = Tensor(np.random.default_rng(5).normal(size=(3, 32, 32)))
    off = dec.DecoderConfig(C=8, n_cls=3, variant=variant, zir_enabled=False)
    pyr = model.features(img)
    dp = model.decoder_params
    a = dec.decoder_forward(pyr, dp, on)
    b = dec.decoder_forward(pyr, {k: v for k, v in dp.items() if not k.startswith("zir")}, off)
    assert np.array_equal(a.data, b.data)

    loss = T.cross_entropy(a, np.random.default_rng(6).integers(0, 3, size=(32, 32)))
    loss.backward()
    for k, v in dp.items():
        v.data = v.data - 0.1 * v.grad
    assert not np.array_equal(dec.decoder_forward(pyr, dp, on).data, dec.decoder_forward(pyr, dp, off).data)


@pytest.mark.parametrize("variant", dec.VARIANTS)
def test_every_parameter_receives_gradient(variant):
    bcfg = bb.BackboneConfig([8, 8, 16, 16], [1, 0, 0, 1], [1, 1, 2, 2], ffn_ratio=2)
    model = SegRet.create(bcfg, dec.DecoderConfig(C=8, n_cls=3, variant=variant), seed=1, dtype="f64")
    # 64x64 keeps the last stage at 2x2; on a 1x1 grid softmax is constant and Q/K get no gradient
    img = Tensor(np.random.default_rng(7).normal(size=(3, 64, 64)))
    target = np.random.default_rng(8).integers(0, 3, size=(64, 64))

    def zero_grads():
        model.zero_grad()
        T.cross_entropy(model(img), target).backward()
        return {k for k, v in model.params.items() if v.grad is None or not np.any(v.grad)}

    # literal: F_i only feeds the zero conv, so its projection is silent at step 0
    expected = {k for k in model.params if k.startswith("decoder.lin")} if variant == "literal" else set()
    assert zero_grads() == expected
    for k, v in model.params.items():
        if k.startswith("decoder.zir"):
            v.data = v.data + 0.01
    assert zero_grads() == set()


def test_micro_end_to_end_shape_and_determinism():
    model = SegRet.create(bb.named_config("micro"), dec.DecoderConfig(C=16, n_cls=5), seed=0)
    img = np.random.default_rng(9).normal(size=(3, 64, 64)).astype(np.float32)
    a = model.predict_logits(img)
    assert a.shape == (5, 64, 64)
    assert np.array_equal(a, model.predict_logits(img))


def test_count_params_hand_example():
    cfg = dec.DecoderConfig(C=4, n_cls=2)
    assert dec.count_params(cfg, [2, 3]) == 65
    assert dec.zir_param_count(cfg, [2, 3]) == 25
    assert dec.count_params(dec.DecoderConfig(C=4, n_cls=2, zir_enabled=False), [2, 3]) == 40


@settings(max_examples=1000, deadline=None)
@given(
    st.integers(1, 64),
    st.integers(2, 30),
    st.sampled_from(dec.VARIANTS),
    st.booleans(),
    st.lists(st.integers(1, 64), min_size=1, max_size=5),
)
def test_count_params_matches_enumeration(C, n_cls, variant, zir, chans):
    cfg = dec.DecoderConfig(C=C, n_cls=n_cls, variant=variant, zir_enabled=zir)
    enumerated = sum(int(np.prod(s)) for s in dec.param_shapes(cfg, chans).values())
    assert dec.count_params(cfg, chans) == enumerated
    if variant == "projected":
        assert dec.fused_channels(cfg, chans) == len(chans) * C


def test_count_params_matches_allocated_tensors():
    for variant in dec.VARIANTS:
        cfg = dec.DecoderConfig(C=8, n_cls=4, variant=variant)
        params = dec.init_params(cfg, [4, 8, 16, 32], rng=0)
        assert dec.count_params(cfg, [4, 8, 16, 32]) == sum(p.data.size for p in params.values())
        assert all(not np.any(v.data) for k, v in params.items() if k.startswith("zir"))
