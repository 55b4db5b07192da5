"""
Training loop with periodic caption re-matching.

On a matching epoch (epoch mod K == 0) every batch is re-paired with captions
from the FIFO pool and trained with the contrastive, inter-modal and
intra-modal terms; other epochs train the original pairs without the
intra-modal term. Epochs are numbered from 1.
"""
import logging
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional

import dill
import numpy as np

from src.data_io import save_model_state
from src.errors import InvalidConfigError, MissingInputError
from src.features import FrozenEncoding, encode_captions, encode_images, init_model_state
from src.losses import LossWeights, PairBatch, total_loss
from src.matching import DEFENSE_MODES, CaptionPool, make_matcher, pool_update
from src.ot_core import GRAD_MODES, SinkhornConfig
from src.poison import poison_dataset

logger = logging.getLogger(__name__)

POOL_STREAM = 1
# full method, then OT matching swapped for global matching, then each OT loss off
ABLATIONS = ('full', 'no_ot_match', 'no_im', 'no_sm')


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 5e-3
    pool_size: int = 512
    weights: LossWeights = field(default_factory=LossWeights)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    seed: int = 0
    defense_mode: str = 'otcclip'
    match_every_epoch: bool = False
    train_matched_text: bool = True
    threads: int = 1
    checkpoint_every: int = 0
    grad_mode: str = 'envelope'
    include_entropy: bool = True
    match_chunk: int = 64
    d: int = 16
    d_e: int = 16
    tau: float = 0.07
    resume_from: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, 'weights', LossWeights(**self.weights))
        if isinstance(self.sinkhorn, dict):
            object.__setattr__(self, 'sinkhorn', SinkhornConfig(**self.sinkhorn))
        if self.epochs < 1:
            raise InvalidConfigError('epochs must be >= 1, got %r' % (self.epochs,))
        if self.batch_size < 1 or self.batch_size > self.pool_size:
            raise InvalidConfigError('batch size must satisfy 1 <= N <= P (N=%r, P=%r)'
                                     % (self.batch_size, self.pool_size))
        if not self.lr > 0:
            raise InvalidConfigError('lr must be > 0, got %r' % (self.lr,))
        if self.defense_mode not in DEFENSE_MODES:
            raise InvalidConfigError('defense_mode must be one of %s, got %r' % (DEFENSE_MODES, self.defense_mode))
        if self.grad_mode not in GRAD_MODES:
            raise InvalidConfigError('grad_mode must be one of %s, got %r' % (GRAD_MODES, self.grad_mode))
        if self.threads < 1 or self.match_chunk < 1 or self.checkpoint_every < 0:
            raise InvalidConfigError('threads and match_chunk must be >= 1, checkpoint_every >= 0')

    @property
    def K(self):
        return self.weights.K

    def effective_weights(self):
        if self.defense_mode == 'none':
            return LossWeights(lambda_c=self.weights.lambda_c, lambda_im=0.0, lambda_sm=0.0, K=self.weights.K)
        return self.weights

    def is_matching_epoch(self, epoch):
        if self.defense_mode == 'none':
            return False
        return self.match_every_epoch or epoch % self.K == 0

    def is_intra_epoch(self, epoch):
        return self.defense_mode != 'none' and epoch % self.K == 0

    @property
    def ablation_label(self):
        if self.defense_mode == 'none':
            return 'none'
        parts = []
        if self.defense_mode == 'global_baseline':
            parts.append('no_ot_match')
        if self.weights.lambda_im == 0:
            parts.append('no_im')
        if self.weights.lambda_sm == 0:
            parts.append('no_sm')
        return '+'.join(parts) or 'full'


def apply_ablation(cfg, name):
    """TrainConfig for one ablation variant of cfg."""
    if name not in ABLATIONS:
        raise InvalidConfigError('ablation must be one of %s, got %r' % (ABLATIONS, name))
    if name == 'no_ot_match':
        return replace(cfg, defense_mode='global_baseline')
    if name == 'no_im':
        return replace(cfg, weights=replace(cfg.weights, lambda_im=0.0))
    if name == 'no_sm':
        return replace(cfg, weights=replace(cfg.weights, lambda_sm=0.0))
    return cfg


@dataclass
class EpochRecord:
    epoch: int
    matching: bool
    intra_active: bool
    clip: float
    inter: float
    intra: float
    total: float
    steps: int
    pool_writes: int
    audit_poisoned: int = 0
    audit_defended: Optional[float] = None

    def as_record(self):
        return dict(self.__dict__)


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    final_model: object = None

    def as_records(self):
        return [r.as_record() for r in self.records]


def adversarial_rows(dataset):
    """Boolean mask of rows whose caption is one of the adversarial templates."""
    if dataset.poison is None:
        return np.zeros(len(dataset), dtype=bool)
    templates = set(tuple(t) for t in dataset.poison['adv_captions'])
    return np.array([tuple(int(t) for t in cap) in templates for cap in dataset.captions], dtype=bool)


class Trainer(object):
    def __init__(self, dataset, cfg, out_dir=None, step_log=None):
        self.dataset = dataset
        self.cfg = cfg
        self.weights = cfg.effective_weights()
        self.matcher = make_matcher(cfg.defense_mode, cfg.sinkhorn, include_entropy=cfg.include_entropy,
                                    threads=cfg.threads, chunk=cfg.match_chunk)
        self.out_dir = out_dir
        self.step_log = step_log
        self.adv_rows = adversarial_rows(dataset)
        self.model = None
        self.pool = None
        self.log = TrainLog()
        self.epoch = 0

    def init(self, model=None, pool=None):
        world = self.dataset.world
        cfg = self.cfg
        self.model = model if model is not None else init_model_state(
            cfg.seed, d_in=world.d_in, d=cfg.d, d_e=cfg.d_e, vocab_size=world.vocab_size, tau=cfg.tau)
        if cfg.defense_mode == 'none':
            self.pool = None
        elif pool is not None:
            self.pool = pool
        else:
            self.pool = CaptionPool.from_random_captions(self.model, cfg.pool_size, world.caption_len,
                                                         [cfg.seed, POOL_STREAM])
        return self

    def batches(self, epoch):
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.dataset))
        n = self.cfg.batch_size
        return [order[i:i + n] for i in range(0, len(order), n)]

    def step(self, rows, epoch):
        """One batch: encode, optionally re-match, losses and gradients. Returns (report, audit)."""
        world = self.dataset.world
        images = encode_images(self.dataset.images[rows], self.model, world.h, world.w)
        captions = encode_captions(self.dataset.captions[rows], self.model)

        audit = None
        paired = captions
        if self.cfg.is_matching_epoch(epoch):
            result = self.matcher.match(images, self.pool)
            paired = self.matched_captions(result.chosen)
            poisoned = self.dataset.poison_flags[rows]
            if np.any(poisoned):
                chosen_adv = np.array([s >= 0 and self.adv_rows[s] for s in result.chosen_source_ids])
                audit = (int(poisoned.sum()), int(np.sum(poisoned & ~chosen_adv)))

        report = total_loss(PairBatch(images, paired), epoch, self.weights, self.cfg.sinkhorn, self.model,
                            grad_mode=self.cfg.grad_mode, intra_active=self.cfg.is_intra_epoch(epoch))
        if self.pool is not None:
            pool_update(self.pool, [c.spatial for c in captions], np.stack([c.pooled for c in captions]),
                        self.dataset.sample_ids[rows], tokens=self.dataset.captions[rows])
        return report, audit

    def matched_captions(self, chosen):
        """
        Captions paired with the batch on a matching epoch. Chosen entries are
        re-encoded from their tokens so the text encoder trains on them too;
        without tokens (or with train_matched_text off) the stored features are
        used and gradients stop at the pool.
        """
        tokens = self.pool.tokens
        if self.cfg.train_matched_text and tokens is not None:
            return encode_captions([tokens[p] for p in chosen], self.model)
        fine = self.pool.fine
        pooled = self.pool.pooled
        return [FrozenEncoding(fine[p], pooled[p]) for p in chosen]

    def update(self, grads):
        for name, value in self.model.params().items():
            value -= self.cfg.lr * grads[name]
        self.model.step += 1
        self.model.check_finite()

    def run_epoch(self, epoch):
        sums = dict(clip=0.0, inter=0.0, intra=0.0, total=0.0)
        poisoned = defended = 0
        batches = self.batches(epoch)
        for rows in batches:
            report, audit = self.step(rows, epoch)
            self.update(report.grads)
            for key in sums:
                sums[key] += getattr(report, key)
            if audit is not None:
                poisoned += audit[0]
                defended += audit[1]
            if self.step_log is not None:
                self.step_log(dict(report.as_record(), epoch=epoch, step=self.model.step))
        n = float(len(batches))
        record = EpochRecord(epoch=epoch, matching=self.cfg.is_matching_epoch(epoch),
                             intra_active=self.cfg.is_intra_epoch(epoch),
                             clip=sums['clip'] / n, inter=sums['inter'] / n, intra=sums['intra'] / n,
                             total=sums['total'] / n, steps=len(batches),
                             pool_writes=0 if self.pool is None else self.pool.writes,
                             audit_poisoned=poisoned,
                             audit_defended=defended / float(poisoned) if poisoned else None)
        self.log.records.append(record)
        self.epoch = epoch
        logger.info('epoch %d%s: total %.4f (clip %.4f, inter %.4f, intra %.4f), defended %s',
                    epoch, ' [match]' if record.matching else '', record.total, record.clip,
                    record.inter, record.intra,
                    '-' if record.audit_defended is None else '%.3f' % record.audit_defended)
        return record

    def run(self):
        if self.model is None:
            self.init()
        for epoch in range(self.epoch + 1, self.cfg.epochs + 1):
            self.run_epoch(epoch)
            if self.cfg.checkpoint_every and epoch % self.cfg.checkpoint_every == 0:
                self.save_ith(epoch)
        self.log.final_model = self.model
        return self.model, self.log

    def save_ith(self, ith_epoch):
        if self.out_dir is None:
            return
        path = os.path.join(self.out_dir, 'checkpoints')
        if not os.path.exists(path):
            os.makedirs(path)
        save_model_state(self.model, os.path.join(path, 'epoch_%03d' % ith_epoch))
        with open(os.path.join(path, 'trainer_%03d.dill' % ith_epoch), mode='wb') as f:
            dill.dump({'epoch': ith_epoch, 'model': self.model, 'pool': self.pool, 'log': self.log}, f)

    def resume(self, path):
        if not os.path.exists(path):
            raise MissingInputError('no trainer snapshot at %s' % path)
        with open(path, mode='rb') as f:
            snapshot = dill.load(f)
        self.model = snapshot['model']
        self.pool = snapshot['pool']
        self.log = snapshot['log']
        self.epoch = snapshot['epoch']
        logger.info('resumed from %s after epoch %d', path, self.epoch)
        return self


def train_epoch(state, data, pool, epoch, cfg):
    """One epoch on copies of state and pool; the inputs are left as they were."""
    trainer = Trainer(data, cfg).init(model=state.copy(), pool=None if pool is None else pool.copy())
    record = trainer.run_epoch(epoch)
    return trainer.model, trainer.pool, record


def train_run(dataset, cfg, poison=None, out_dir=None, step_log=None):
    if poison is not None:
        dataset = poison_dataset(dataset, poison, cfg.sinkhorn, d=cfg.d, d_e=cfg.d_e, tau=cfg.tau)
    trainer = Trainer(dataset, cfg, out_dir=out_dir, step_log=step_log)
    if cfg.resume_from:
        trainer.resume(cfg.resume_from)
    else:
        trainer.init()
    return trainer.run()
