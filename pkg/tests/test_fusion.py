import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visaware import tensor as T
from visaware.errors import ContractError, LengthError
from visaware.fusion import (FusedSequence, FusionConfig, attend_fuse, encode_and_fuse, init_encoder,
                             init_fusion, init_image_projection, project_images, residual_norm_fuse,
                             transformer_encode)
from visaware.gradcheck import grad_check
from visaware.gradsuite import model_cases
from visaware.tensor import Tensor

CFG = FusionConfig(vocab_size=20, d=16, n_heads=4, n_fusion_heads=2, n_layers=2, d_ff=24, max_len=12, d_img=10)


@pytest.fixture(scope="module")
def params():
    rng = np.random.default_rng(0)
    p = {}
    p.update(init_encoder(CFG, rng))
    p.update(init_image_projection(CFG, rng))
    p.update(init_fusion(CFG, rng))
    return p


def layer_norm_reference(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def test_config_head_divisibility():
    with pytest.raises(ContractError):
        FusionConfig(vocab_size=5, d=10, n_heads=4)
    with pytest.raises(ContractError):
        FusionConfig(vocab_size=5, d=12, n_heads=4, n_fusion_heads=5)


# -- encoder -----------------------------------------------------------------------

def test_encoder_output_shape(params):
    assert transformer_encode([3, 4, 5], params, CFG).shape == (3, CFG.d)
    assert transformer_encode(np.ones((2, 7), dtype=int), params, CFG).shape == (2, 7, CFG.d)


def test_encoder_attention_rows_are_distributions(params):
    ids = np.array([[3, 4, 5, 6, 0], [7, 8, 9, 10, 11]])
    mask = np.array([[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]], dtype=bool)
    _, attn = transformer_encode(ids, params, CFG, mask, return_attention=True)
    assert len(attn) == CFG.n_layers
    for w in attn:
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(w.data[0, :, :, 4] == 0.0)
        assert np.all(w.data >= 0)


def test_padding_does_not_change_real_positions(params):
    alone = transformer_encode([3, 4, 5], params, CFG).data
    ids = np.array([[3, 4, 5, 0, 0]])
    mask = np.array([[1, 1, 1, 0, 0]], dtype=bool)
    padded = transformer_encode(ids, params, CFG, mask).data
    np.testing.assert_allclose(padded[0, :3], alone, atol=1e-12)


def test_encoder_length_error(params):
    with pytest.raises(LengthError):
        transformer_encode(list(range(1, 14)), params, CFG)


def test_encoder_two_layer_gradient():
    case = next(c for c in model_cases() if c.name == "transformer_encode")
    report = grad_check(case.fn, [], sampler=case.sampler, coords_per_input=case.coords_per_input, name=case.name)
    assert report.passed, report.line()


# -- image projection --------------------------------------------------------------

def test_zero_weights_give_relu_bias():
    b0 = np.array([-1.0, 0.5, 2.0])
    p = {"img.w": Tensor(np.zeros((4, 3))), "img.b": Tensor(b0)}
    out = project_images(np.ones((5, 4)), p).data
    np.testing.assert_array_equal(out, np.tile([0.0, 0.5, 2.0], (5, 1)))


def test_projection_width_and_row_permutation(params, rng):
    x = rng.standard_normal((6, CFG.d_img))
    perm = rng.permutation(6)
    out = project_images(x, params).data
    assert out.shape == (6, CFG.d)
    np.testing.assert_array_equal(project_images(x[perm], params).data, out[perm])


def test_projection_needs_an_image(params):
    with pytest.raises(ContractError):
        project_images(np.zeros((0, CFG.d_img)), params)


# -- attention fusion --------------------------------------------------------------

def test_single_image_gets_all_weight(params, rng):
    H = Tensor(rng.standard_normal((5, CFG.d)))
    m_row = rng.standard_normal((1, CFG.d))
    out, w = attend_fuse(H, Tensor(m_row), params, CFG, return_attention=True)
    np.testing.assert_array_equal(w.data, np.ones_like(w.data))
    value = (m_row @ params["fuse.attn.wv"].data + params["fuse.attn.bv"].data) @ params["fuse.attn.wo"].data \
        + params["fuse.attn.bo"].data
    np.testing.assert_allclose(out.data, np.repeat(value, 5, axis=0), atol=1e-12)


def test_identical_images_give_identical_rows(params, rng):
    H = Tensor(rng.standard_normal((4, CFG.d)) * 3)
    M = Tensor(np.tile(rng.standard_normal(CFG.d), (3, 1)))
    out = attend_fuse(H, M, params, CFG).data
    np.testing.assert_allclose(out, np.repeat(out[:1], 4, axis=0), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 9))
def test_image_permutation_invariance(params, seed, m):
    r = np.random.default_rng(seed)
    H = Tensor(r.standard_normal((2, 5, CFG.d)))
    M = r.standard_normal((2, m, CFG.d))
    perm = r.permutation(m)
    a = attend_fuse(H, Tensor(M), params, CFG).data
    b = attend_fuse(H, Tensor(M[:, perm]), params, CFG).data
    assert np.max(np.abs(a - b)) <= 1e-9


def test_empty_image_set_gives_zeros(params, rng):
    H = Tensor(rng.standard_normal((3, CFG.d)))
    np.testing.assert_array_equal(attend_fuse(H, None, params, CFG).data, np.zeros((3, CFG.d)))
    np.testing.assert_array_equal(attend_fuse(H, Tensor(np.zeros((0, CFG.d))), params, CFG).data,
                                  np.zeros((3, CFG.d)))


# -- residual norm fusion ----------------------------------------------------------

def test_identity_reduction_is_layer_norm(params, rng):
    H = rng.standard_normal((2, 6, CFG.d))
    fused = residual_norm_fuse(Tensor(H), Tensor(np.zeros_like(H)), params, CFG)
    assert isinstance(fused, FusedSequence)
    np.testing.assert_allclose(fused.values.data, layer_norm_reference(H), atol=1e-12)


def test_constant_rows_fuse_to_zero(params):
    H = np.full((3, CFG.d), 2.5)
    fused = residual_norm_fuse(Tensor(H), Tensor(np.zeros_like(H)), params, CFG)
    np.testing.assert_array_equal(fused.values.data, np.zeros_like(H))


def test_general_weights_follow_the_formula(params, rng):
    p = dict(params)
    W, b = rng.standard_normal((CFG.d, CFG.d)), rng.standard_normal(CFG.d)
    p["fuse.w"], p["fuse.b"] = Tensor(W), Tensor(b)
    H, Hp = rng.standard_normal((4, CFG.d)), rng.standard_normal((4, CFG.d))
    expected = layer_norm_reference((W @ (H + Hp).T).T + b)
    np.testing.assert_allclose(residual_norm_fuse(Tensor(H), Tensor(Hp), p, CFG).values.data, expected, atol=1e-12)


def test_fuse_shape_mismatch(params):
    with pytest.raises(ContractError):
        residual_norm_fuse(Tensor(np.ones((3, CFG.d))), Tensor(np.ones((2, CFG.d))), params, CFG)


def test_fuse_gradient():
    case = next(c for c in model_cases() if c.name == "residual_norm_fuse")
    report = grad_check(case.fn, [], sampler=case.sampler, coords_per_input=case.coords_per_input, name=case.name)
    assert report.passed, report.line()


# -- whole stack -------------------------------------------------------------------

def test_stack_shape_and_text_only_paths_agree(params, rng):
    ids = np.array([[1, 2, 3, 0], [4, 5, 6, 7]])
    mask = ids > 0
    mask[1] = True
    with_images = encode_and_fuse(ids, mask, rng.standard_normal((2, 3, CFG.d_img)), params, CFG)
    assert with_images.values.shape == (2, 4, CFG.d)
    none = encode_and_fuse(ids, mask, None, params, CFG).values.data
    empty = encode_and_fuse(ids, mask, np.zeros((2, 0, CFG.d_img)), params, CFG).values.data
    assert none.tobytes() == empty.tobytes()
    H = transformer_encode(ids, params, CFG, mask).data
    np.testing.assert_allclose(none, layer_norm_reference(H), atol=1e-9)


def test_stack_is_deterministic(params, rng):
    ids = np.array([[1, 2, 3]])
    imgs = rng.standard_normal((1, 4, CFG.d_img))
    a = encode_and_fuse(ids, None, imgs, params, CFG).values.data
    b = encode_and_fuse(ids, None, imgs, params, CFG).values.data
    assert a.tobytes() == b.tobytes()
