"""
Training objectives: symmetric InfoNCE on pooled features, inter-modality
transport between patches and tokens, intra-modality self-transport, and
their gated weighted sum.

Every term returns its value together with the gradient w.r.t. its feature
inputs; total_loss pushes those through the encoders into parameter gradients.
Batch terms are plain sums over pairs.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from scipy.special import log_softmax, softmax

from src.errors import InvalidConfigError, ShapeError
from src.features import pairwise_similarity
from src.ot_core import entropic_objectives

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_im: float = 2.0
    lambda_sm: float = 0.4
    K: int = 2

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_im, self.lambda_sm) < 0:
            raise InvalidConfigError('loss weights must be >= 0')
        if int(self.K) < 1:
            raise InvalidConfigError('matching period K must be >= 1, got %r' % (self.K,))

    def gate(self, epoch):
        return epoch % self.K == 0


@dataclass
class LossTerm:
    value: float
    d_first: object
    d_second: object
    transport: float = 0.0


@dataclass
class LossReport:
    clip: float
    inter: float
    intra: float
    total: float
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    inter_transport: float = 0.0
    intra_transport: float = 0.0
    intra_active: bool = False

    def as_record(self):
        return {'clip': self.clip, 'inter': self.inter, 'intra': self.intra, 'total': self.total,
                'inter_transport': self.inter_transport, 'intra_transport': self.intra_transport,
                'intra_active': self.intra_active}


def clip_infonce(f_g, y_g, tau):
    f_g = np.atleast_2d(np.asarray(f_g, dtype=np.float64))
    y_g = np.atleast_2d(np.asarray(y_g, dtype=np.float64))
    if not tau > 0:
        raise InvalidConfigError('temperature must be > 0, got %r' % (tau,))
    if f_g.shape != y_g.shape or f_g.shape[0] < 1:
        raise ShapeError('InfoNCE needs two non-empty (N, d) batches, got %s and %s' % (f_g.shape, y_g.shape))
    n = f_g.shape[0]
    logits = f_g.dot(y_g.T) / tau
    diag = np.arange(n)
    # image->text over rows, text->image over columns
    loss = -(np.sum(log_softmax(logits, axis=1)[diag, diag]) +
             np.sum(log_softmax(logits, axis=0)[diag, diag])) / (2.0 * n)
    eye = np.eye(n)
    d_logits = (softmax(logits, axis=1) - eye + softmax(logits, axis=0) - eye) / (2.0 * n)
    return LossTerm(value=float(loss), d_first=d_logits.dot(y_g) / tau, d_second=d_logits.T.dot(f_g) / tau)


def _cross_cost(x, y):
    return 1.0 - pairwise_similarity(x, y)


def _inter_terms(f_list, y_list, cfg, grad_mode):
    objectives = entropic_objectives([_cross_cost(f, y) for f, y in zip(f_list, y_list)], cfg, grad_mode)
    terms = []
    for f, y, obj in zip(f_list, y_list, objectives):
        d_sim = -obj.grad_c
        terms.append(LossTerm(value=obj.value, d_first=d_sim.dot(y), d_second=d_sim.T.dot(f),
                              transport=obj.transport_cost))
    return terms


def _intra_terms(f_list, y_list, cfg, grad_mode):
    costs = [_cross_cost(f, f) for f in f_list] + [_cross_cost(y, y) for y in y_list]
    objectives = entropic_objectives(costs, cfg, grad_mode)
    n = len(f_list)
    terms = []
    for i, (f, y) in enumerate(zip(f_list, y_list)):
        img, txt = objectives[i], objectives[n + i]
        d_img = -img.grad_c
        d_txt = -txt.grad_c
        terms.append(LossTerm(value=img.value + txt.value,
                              d_first=(d_img + d_img.T).dot(f), d_second=(d_txt + d_txt.T).dot(y),
                              transport=img.transport_cost + txt.transport_cost))
    return terms


def inter_modal_loss(f_s, y_s, cfg, grad_mode='envelope'):
    return _inter_terms([np.asarray(f_s, dtype=np.float64)], [np.asarray(y_s, dtype=np.float64)], cfg, grad_mode)[0]


def intra_modal_loss(f_s, y_s, cfg, grad_mode='envelope'):
    return _intra_terms([np.asarray(f_s, dtype=np.float64)], [np.asarray(y_s, dtype=np.float64)], cfg, grad_mode)[0]


@dataclass
class PairBatch:
    """Image encodings and the caption encodings they are paired with."""
    images: list
    captions: list

    def __post_init__(self):
        if len(self.images) != len(self.captions) or not self.images:
            raise ShapeError('a pair batch needs equally many images and captions (>= 1)')


def total_loss(batch, epoch, w, cfg, model, grad_mode='envelope', intra_active=None):
    """
    lambda_c * clip + lambda_im * inter + gate * lambda_sm * intra, with
    gate = (epoch mod K == 0) unless intra_active overrides it. Terms whose
    weight is zero are not evaluated and report 0.
    """
    gate = w.gate(epoch) if intra_active is None else bool(intra_active)
    f_s = [e.spatial for e in batch.images]
    y_s = [e.spatial for e in batch.captions]
    n = len(f_s)

    d_img_spatial = [np.zeros_like(f) for f in f_s]
    d_txt_spatial = [np.zeros_like(y) for y in y_s]
    report = LossReport(clip=0.0, inter=0.0, intra=0.0, total=0.0, intra_active=gate)

    clip = clip_infonce(np.stack([e.pooled for e in batch.images]),
                        np.stack([e.pooled for e in batch.captions]), model.tau)
    report.clip = clip.value

    if w.lambda_im > 0:
        for i, term in enumerate(_inter_terms(f_s, y_s, cfg, grad_mode)):
            report.inter += term.value
            report.inter_transport += term.transport
            d_img_spatial[i] += w.lambda_im * term.d_first
            d_txt_spatial[i] += w.lambda_im * term.d_second

    if gate and w.lambda_sm > 0:
        for i, term in enumerate(_intra_terms(f_s, y_s, cfg, grad_mode)):
            report.intra += term.value
            report.intra_transport += term.transport
            d_img_spatial[i] += w.lambda_sm * term.d_first
            d_txt_spatial[i] += w.lambda_sm * term.d_second

    report.total = w.lambda_c * report.clip + w.lambda_im * report.inter
    if gate:
        report.total += w.lambda_sm * report.intra

    grads = model.zero_grads()
    for i in range(n):
        batch.images[i].backward(model, d_img_spatial[i], w.lambda_c * clip.d_first[i], grads)
    for i in range(n):
        batch.captions[i].backward(model, d_txt_spatial[i], w.lambda_c * clip.d_second[i], grads)
    report.grads = grads
    return report
