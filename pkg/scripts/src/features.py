"""
Toy differentiable image/text encoders.

Each patch (or token embedding) goes through a linear map, tanh and row
normalisation; the pooled feature is the renormalised mean of the rows. The
backward pass is written out by hand for this fixed graph.
"""
import logging
from dataclasses import dataclass

import numpy as np

from src.errors import DegenerateNormError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
PARAM_NAMES = ('W_img', 'b_img', 'embed', 'P_txt', 'b_txt')


@dataclass
class RawImage:
    patches: np.ndarray
    h: int
    w: int

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.h * self.w < 1 or self.patches.ndim != 2 or self.patches.shape[0] != self.h * self.w:
            raise ShapeError('image needs h*w = %d patch rows, got %s' % (self.h * self.w, self.patches.shape))
        if not np.all(np.isfinite(self.patches)):
            raise NumericalError('image patches must be finite')


@dataclass
class RawCaption:
    tokens: np.ndarray
    vocab_size: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1 or self.tokens.shape[0] < 1:
            raise ShapeError('caption needs at least one token')
        if np.any(self.tokens < 0) or np.any(self.tokens >= self.vocab_size):
            raise ShapeError('caption token ids must lie in [0, %d)' % self.vocab_size)


@dataclass
class ModelState:
    W_img: np.ndarray
    b_img: np.ndarray
    embed: np.ndarray
    P_txt: np.ndarray
    b_txt: np.ndarray
    tau: float = 0.07
    rng_seed: int = 0
    step: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise NumericalError('temperature must be > 0, got %r' % (self.tau,))

    @property
    def d_in(self):
        return self.W_img.shape[0]

    @property
    def d(self):
        return self.W_img.shape[1]

    @property
    def vocab_size(self):
        return self.embed.shape[0]

    def params(self):
        return dict((name, getattr(self, name)) for name in PARAM_NAMES)

    def zero_grads(self):
        return dict((name, np.zeros_like(getattr(self, name))) for name in PARAM_NAMES)

    def copy(self):
        return ModelState(tau=self.tau, rng_seed=self.rng_seed, step=self.step,
                          **dict((k, v.copy()) for k, v in self.params().items()))

    def check_finite(self):
        for name, value in self.params().items():
            if not np.all(np.isfinite(value)):
                raise NumericalError('parameter %s became non-finite' % name)


def init_model_state(seed, d_in=12, d=16, d_e=16, vocab_size=64, tau=0.07):
    rng = np.random.default_rng(seed)
    return ModelState(W_img=rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d)),
                      b_img=np.zeros(d),
                      embed=rng.normal(0.0, 1.0, size=(vocab_size, d_e)),
                      P_txt=rng.normal(0.0, 1.0 / np.sqrt(d_e), size=(d_e, d)),
                      b_txt=np.zeros(d),
                      tau=tau, rng_seed=seed, step=0)


def _normalize_rows(h):
    r = np.sqrt(np.sum(h * h, axis=1))
    if np.any(r < NORM_FLOOR):
        raise DegenerateNormError('feature row with norm below %g cannot be normalised' % NORM_FLOOR)
    return h / r[:, None], r


def _normalize(x):
    r = float(np.sqrt(np.dot(x, x)))
    if r < NORM_FLOOR:
        raise DegenerateNormError('pooled feature with norm below %g cannot be normalised' % NORM_FLOOR)
    return x / r, r


class Encoding(object):
    """
    Forward cache of one encoded image or caption.

    spatial -- (k, d) unit rows, pooled -- unit d-vector.
    """

    def __init__(self, kind, inputs, tokens, pre, act, row_norms, spatial, mean_norm, pooled):
        self.kind = kind
        self.inputs = inputs
        self.tokens = tokens
        self._pre = pre
        self._act = act
        self._row_norms = row_norms
        self.spatial = spatial
        self._mean_norm = mean_norm
        self.pooled = pooled

    def backward(self, model, d_spatial=None, d_pooled=None, grads=None):
        """
        Accumulates parameter gradients into grads (keyed like ModelState.params)
        and returns the gradient w.r.t. the encoder input rows.
        """
        k, d = self.spatial.shape
        dz = np.zeros((k, d)) if d_spatial is None else np.array(d_spatial, dtype=np.float64)
        if d_pooled is not None:
            g = self.pooled
            dm = (d_pooled - g * np.dot(g, d_pooled)) / self._mean_norm
            dz += dm[None, :] / k
        z = self.spatial
        dh = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / self._row_norms[:, None]
        da = dh * (1.0 - self._act * self._act)

        if grads is None:
            grads = model.zero_grads()
        if self.kind == 'image':
            grads['W_img'] += self.inputs.T.dot(da)
            grads['b_img'] += da.sum(axis=0)
            return da.dot(model.W_img.T)
        grads['P_txt'] += self.inputs.T.dot(da)
        grads['b_txt'] += da.sum(axis=0)
        d_inputs = da.dot(model.P_txt.T)
        np.add.at(grads['embed'], self.tokens, d_inputs)
        return d_inputs


class FrozenEncoding(object):
    """Stored features (e.g. a pool entry); gradients stop here."""

    def __init__(self, spatial, pooled):
        self.spatial = np.asarray(spatial, dtype=np.float64)
        self.pooled = np.asarray(pooled, dtype=np.float64)

    def backward(self, model, d_spatial=None, d_pooled=None, grads=None):
        return None


def _encode(kind, inputs, tokens, weight, bias):
    pre = inputs.dot(weight) + bias
    act = np.tanh(pre)
    spatial, row_norms = _normalize_rows(act)
    pooled, mean_norm = _normalize(spatial.mean(axis=0))
    return Encoding(kind, inputs, tokens, pre, act, row_norms, spatial, mean_norm, pooled)


def encode_image(img, m):
    if not isinstance(img, RawImage):
        img = RawImage(*img)
    if img.patches.shape[1] != m.d_in:
        raise ShapeError('patch width %d does not match encoder input %d' % (img.patches.shape[1], m.d_in))
    return _encode('image', img.patches, None, m.W_img, m.b_img)


def encode_text(cap, m):
    if not isinstance(cap, RawCaption):
        cap = RawCaption(cap, m.vocab_size)
    if cap.vocab_size != m.vocab_size:
        raise ShapeError('caption vocabulary %d does not match encoder %d' % (cap.vocab_size, m.vocab_size))
    return _encode('text', m.embed[cap.tokens], cap.tokens, m.P_txt, m.b_txt)


def encode_images(patch_stack, m, h, w):
    return [encode_image(RawImage(p, h, w), m) for p in patch_stack]


def encode_captions(captions, m):
    return [encode_text(RawCaption(c, m.vocab_size), m) for c in captions]


def pairwise_similarity(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError('similarity needs (k, d) inputs with equal d, got %s and %s' % (x.shape, y.shape))
    return np.einsum('ud,vd->uv', x, y)
