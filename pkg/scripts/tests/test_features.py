import numpy as np
import pytest

from conftest import central_difference, relative_error
from src.errors import DegenerateNormError, NumericalError, ShapeError
from src.features import (
    FrozenEncoding,
    ModelState,
    RawCaption,
    RawImage,
    encode_captions,
    encode_image,
    encode_images,
    encode_text,
    init_model_state,
    pairwise_similarity,
)


@pytest.fixture
def model():
    return init_model_state(0, d_in=5, d=4, d_e=3, vocab_size=10)


def test_encodings_are_unit_norm(model):
    rng = np.random.default_rng(0)
    enc = encode_image(RawImage(rng.normal(size=(6, 5)), 2, 3), model)
    assert enc.spatial.shape == (6, 4)
    np.testing.assert_allclose(np.linalg.norm(enc.spatial, axis=1), 1.0, atol=1e-12)
    assert np.linalg.norm(enc.pooled) == pytest.approx(1.0, abs=1e-12)

    txt = encode_text(RawCaption([1, 4, 4, 9], 10), model)
    assert txt.spatial.shape == (4, 4)
    assert np.linalg.norm(txt.pooled) == pytest.approx(1.0, abs=1e-12)


def test_single_patch_pooled_equals_row(model):
    enc = encode_image(RawImage(np.ones((1, 5)), 1, 1), model)
    np.testing.assert_allclose(enc.pooled, enc.spatial[0], atol=1e-12)


def test_degenerate_row_raises():
    m = init_model_state(0, d_in=2, d=3, d_e=2, vocab_size=4)
    m.W_img[:] = 0.0
    with pytest.raises(DegenerateNormError):
        encode_image(RawImage(np.ones((2, 2)), 1, 2), m)


def test_invalid_inputs(model):
    with pytest.raises(ShapeError):
        RawImage(np.zeros((5, 5)), 2, 3)
    with pytest.raises(NumericalError):
        RawImage(np.full((1, 5), np.inf), 1, 1)
    with pytest.raises(ShapeError):
        RawCaption([0, 10], 10)
    with pytest.raises(ShapeError):
        encode_image(RawImage(np.zeros((1, 4)), 1, 1), model)
    with pytest.raises(NumericalError):
        ModelState(W_img=model.W_img, b_img=model.b_img, embed=model.embed, P_txt=model.P_txt,
                   b_txt=model.b_txt, tau=0.0)


def test_batch_helpers_preserve_order(model):
    rng = np.random.default_rng(1)
    stack = rng.normal(size=(3, 4, 5))
    for x, enc in zip(stack, encode_images(stack, model, 2, 2)):
        np.testing.assert_array_equal(enc.pooled, encode_image(RawImage(x, 2, 2), model).pooled)
    caps = [[0, 1], [2, 3]]
    for c, enc in zip(caps, encode_captions(caps, model)):
        np.testing.assert_array_equal(enc.spatial, encode_text(RawCaption(c, 10), model).spatial)


def test_init_is_seeded():
    a = init_model_state(3)
    b = init_model_state(3)
    for name, value in a.params().items():
        np.testing.assert_array_equal(value, b.params()[name])
    assert a.vocab_size == 64 and a.d_in == 12 and a.d == 16


def test_similarity_shape_check():
    assert pairwise_similarity(np.eye(2), np.eye(2)[:1]).shape == (2, 1)
    with pytest.raises(ShapeError):
        pairwise_similarity(np.zeros((2, 3)), np.zeros((2, 4)))


def _image_objective(model, x, d_spatial, d_pooled):
    enc = encode_image(RawImage(x, 2, 2), model)
    return float(np.sum(enc.spatial * d_spatial) + np.dot(enc.pooled, d_pooled))


@pytest.mark.parametrize('seed', range(20))
def test_image_backward_matches_finite_differences(seed, model):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 5))
    d_spatial = rng.normal(size=(4, 4))
    d_pooled = rng.normal(size=4)
    enc = encode_image(RawImage(x, 2, 2), model)
    grads = model.zero_grads()
    d_x = enc.backward(model, d_spatial, d_pooled, grads)

    numeric = central_difference(lambda w: _image_objective(model, x, d_spatial, d_pooled), model.W_img)
    assert relative_error(grads['W_img'], numeric) < 1e-6
    numeric = central_difference(lambda b: _image_objective(model, x, d_spatial, d_pooled), model.b_img)
    assert relative_error(grads['b_img'], numeric) < 1e-6
    numeric = central_difference(lambda xx: _image_objective(model, xx, d_spatial, d_pooled), x.copy())
    assert relative_error(d_x, numeric) < 1e-6


@pytest.mark.parametrize('seed', range(20))
def test_text_backward_matches_finite_differences(seed, model):
    rng = np.random.default_rng(seed)
    tokens = np.array([2, 7, 2])
    d_spatial = rng.normal(size=(3, 4))
    d_pooled = rng.normal(size=4)

    def objective(_):
        enc = encode_text(RawCaption(tokens, 10), model)
        return float(np.sum(enc.spatial * d_spatial) + np.dot(enc.pooled, d_pooled))

    grads = model.zero_grads()
    encode_text(RawCaption(tokens, 10), model).backward(model, d_spatial, d_pooled, grads)
    for name in ('embed', 'P_txt', 'b_txt'):
        numeric = central_difference(objective, model.params()[name])
        assert relative_error(grads[name], numeric) < 1e-6
    # unused vocabulary rows receive no gradient
    assert not np.any(grads['embed'][[0, 1, 3, 4, 5, 6, 8, 9]])


def test_frozen_encoding_has_no_gradient(model):
    grads = model.zero_grads()
    assert FrozenEncoding(np.eye(2), np.ones(2)).backward(model, np.ones((2, 2)), np.ones(2), grads) is None
    assert all(not np.any(g) for g in grads.values())
