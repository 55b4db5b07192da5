"""
Re-matching images to captions from a FIFO caption pool.

OTMatching scores every (image, pool caption) pair by the regularized transport
between image patches and caption tokens; GlobalMatching scores by the cosine
of pooled features. Both pick the best pool entry per image, lowest index on ties.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from src.errors import InvalidConfigError, MissingInputError, ShapeError
from src.features import encode_captions, pairwise_similarity
from src.ot_core import ot_value, sinkhorn_solve, sinkhorn_solve_batch, uniform_weights

logger = logging.getLogger(__name__)

DEFENSE_MODES = ('otcclip', 'global_baseline', 'none')
RANDOM_SOURCE_ID = -1


@dataclass
class MatchResult:
    scores: np.ndarray
    chosen: np.ndarray
    chosen_source_ids: np.ndarray


class CaptionPool(object):
    """
    Ring buffer of P caption representations. Logical index 0 is the oldest
    entry; fine, pooled, source_ids and tokens are always returned in logical
    order. tokens is optional; when present every push must carry it, so the
    trainer can re-encode a chosen caption with the current text encoder.
    """

    def __init__(self, fine, pooled, source_ids, tokens=None):
        pooled = np.asarray(pooled, dtype=np.float64)
        source_ids = np.asarray(source_ids, dtype=np.int64)
        if not (len(fine) == pooled.shape[0] == source_ids.shape[0]) or len(fine) < 1:
            raise ShapeError('pool buffers must be non-empty and of equal length')
        if tokens is not None and len(tokens) != len(fine):
            raise ShapeError('pool holds %d captions but %d token rows' % (len(fine), len(tokens)))
        self.capacity = len(fine)
        self._fine = [np.asarray(f, dtype=np.float64) for f in fine]
        self._pooled = pooled.copy()
        self._ids = source_ids.copy()
        self._tokens = None if tokens is None else [np.asarray(t, dtype=np.int64) for t in tokens]
        self._ptr = 0
        self.writes = 0

    @classmethod
    def from_random_captions(cls, model, capacity, caption_len, seed):
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, model.vocab_size, size=(capacity, caption_len))
        encodings = encode_captions(tokens, model)
        logger.info('caption pool initialised with %d random captions', capacity)
        return cls([e.spatial for e in encodings], np.stack([e.pooled for e in encodings]),
                   np.full(capacity, RANDOM_SOURCE_ID), tokens=tokens)

    @classmethod
    def from_dataset_rows(cls, model, captions, source_ids):
        """Pool holding the given caption token rows, oldest first."""
        encodings = encode_captions(captions, model)
        if not encodings:
            raise MissingInputError('cannot build a caption pool from zero rows')
        return cls([e.spatial for e in encodings], np.stack([e.pooled for e in encodings]), source_ids,
                   tokens=captions)

    def __len__(self):
        return self.capacity

    def _order(self):
        return (self._ptr + np.arange(self.capacity)) % self.capacity

    @property
    def fine(self):
        return [self._fine[i] for i in self._order()]

    @property
    def pooled(self):
        return self._pooled[self._order()]

    @property
    def source_ids(self):
        return self._ids[self._order()]

    @property
    def tokens(self):
        if self._tokens is None:
            return None
        return [self._tokens[i] for i in self._order()]

    def copy(self):
        out = CaptionPool(self.fine, self.pooled, self.source_ids, tokens=self.tokens)
        out.writes = self.writes
        return out

    def push(self, fine, pooled, source_ids, tokens=None):
        num = len(fine)
        if num == 0:
            return self
        pooled = np.asarray(pooled, dtype=np.float64).reshape(num, -1)
        source_ids = np.asarray(source_ids, dtype=np.int64).reshape(num)
        if num > self.capacity:
            raise ShapeError('cannot push %d entries into a pool of %d' % (num, self.capacity))
        if self._tokens is not None and (tokens is None or len(tokens) != num):
            raise ShapeError('this pool keeps caption tokens; push %d token rows with the batch' % num)
        for j in range(num):
            slot = (self._ptr + j) % self.capacity
            self._fine[slot] = np.asarray(fine[j], dtype=np.float64)
            self._pooled[slot] = pooled[j]
            self._ids[slot] = source_ids[j]
            if self._tokens is not None:
                self._tokens[slot] = np.asarray(tokens[j], dtype=np.int64)
        self._ptr = (self._ptr + num) % self.capacity
        self.writes += num
        return self


def pool_update(pool, fine, pooled, source_ids, tokens=None):
    """Drops the oldest N entries and appends the batch at the tail."""
    return pool.push(fine, pooled, source_ids, tokens)


def ot_match_score(img, cap, cfg, include_entropy=True):
    img = np.asarray(img, dtype=np.float64)
    cap = np.asarray(cap, dtype=np.float64)
    if img.shape[0] < 1 or cap.shape[0] < 1:
        raise ShapeError('matching needs non-empty feature sets')
    c = 1.0 - pairwise_similarity(img, cap)
    plan = sinkhorn_solve(uniform_weights(c.shape[0]), uniform_weights(c.shape[1]), c, cfg)
    return 1.0 - ot_value(plan, c, cfg.lam, include_entropy)


def _score_block(imgs, caps, cfg, include_entropy):
    """imgs (I, k, d), caps (G, l, d) -> scores (I, G)."""
    num_imgs, k, _ = imgs.shape
    num_caps, l, _ = caps.shape
    c = 1.0 - np.einsum('ikd,pld->ipkl', imgs, caps).reshape(num_imgs * num_caps, k, l)
    batch = sinkhorn_solve_batch(uniform_weights(k), uniform_weights(l), c, cfg)
    value = np.sum(batch.t * c, axis=(1, 2))
    if include_entropy:
        value = value + cfg.lam * np.sum(xlogy(batch.t, batch.t) - batch.t, axis=(1, 2))
    return (1.0 - value).reshape(num_imgs, num_caps)


def _argmax_rows(scores, pool):
    chosen = np.argmax(scores, axis=1)
    return MatchResult(scores=scores, chosen=chosen, chosen_source_ids=pool.source_ids[chosen])


def match_batch(imgs, pool, cfg, include_entropy=True, threads=1, chunk=64):
    """
    scores[i, p] = ot_match_score(imgs[i], pool.fine[p]). Images sharing a patch
    count are scored in chunks; each chunk writes its own rows.
    """
    if pool is None or len(pool) == 0:
        raise MissingInputError('matching needs a non-empty caption pool')
    if len(imgs) < 1:
        raise ShapeError('matching needs at least one image')
    imgs = [np.asarray(x, dtype=np.float64) for x in imgs]
    fine = pool.fine
    scores = np.empty((len(imgs), len(fine)))

    cap_groups = {}
    for p, f in enumerate(fine):
        cap_groups.setdefault(f.shape, []).append(p)
    img_groups = {}
    for i, x in enumerate(imgs):
        img_groups.setdefault(x.shape, []).append(i)

    jobs = []
    for rows in img_groups.values():
        for start in range(0, len(rows), chunk):
            jobs.append(rows[start:start + chunk])

    def run(rows):
        block = np.stack([imgs[i] for i in rows])
        for cols in cap_groups.values():
            caps = np.stack([fine[p] for p in cols])
            scores[np.ix_(rows, cols)] = _score_block(block, caps, cfg, include_entropy)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            list(pool_exec.map(run, jobs))
    else:
        for rows in jobs:
            run(rows)
    return _argmax_rows(scores, pool)


def global_match_baseline(imgs, pool):
    if pool is None or len(pool) == 0:
        raise MissingInputError('matching needs a non-empty caption pool')
    imgs = np.atleast_2d(np.asarray(imgs, dtype=np.float64))
    scores = np.einsum('id,pd->ip', imgs, pool.pooled)
    return _argmax_rows(scores, pool)


class Matching(object):
    def __init__(self, cfg):
        self.cfg = cfg

    def match(self, img_encodings, pool):
        raise NotImplementedError('Implementation Error')


class OTMatching(Matching):
    def __init__(self, cfg, include_entropy=True, threads=1, chunk=64):
        super(OTMatching, self).__init__(cfg)
        self.include_entropy = include_entropy
        self.threads = threads
        self.chunk = chunk

    def match(self, img_encodings, pool):
        return match_batch([e.spatial for e in img_encodings], pool, self.cfg,
                           include_entropy=self.include_entropy, threads=self.threads, chunk=self.chunk)


class GlobalMatching(Matching):
    def match(self, img_encodings, pool):
        return global_match_baseline(np.stack([e.pooled for e in img_encodings]), pool)


def make_matcher(defense_mode, cfg, include_entropy=True, threads=1, chunk=64):
    if defense_mode == 'otcclip':
        return OTMatching(cfg, include_entropy=include_entropy, threads=threads, chunk=chunk)
    if defense_mode == 'global_baseline':
        return GlobalMatching(cfg)
    if defense_mode == 'none':
        return None
    raise InvalidConfigError('defense_mode must be one of %s, got %r' % (DEFENSE_MODES, defense_mode))
