"""
Evaluation of trained encoders: zero-shot classification with class prompts,
attack success rate, a linear probe on frozen image features and the audit of
how poisoned images get re-matched.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import log_softmax, softmax

from src.data_io import sample_split
from src.errors import InvalidConfigError, MissingInputError, ShapeError
from src.features import RawImage, encode_captions, encode_images
from src.matching import RANDOM_SOURCE_ID, CaptionPool, make_matcher
from src.poison import apply_trigger, trigger_from_record
from src.training import ABLATIONS, adversarial_rows

logger = logging.getLogger(__name__)

# stands in for "a photo of a"
PROMPT_PREFIX = (0, 1, 2)
HELDOUT_STREAM = 2
PROBE_STREAM = 3
AUDIT_STREAM = 4
DEFENSE_ORDER = ('none', 'global_baseline', 'otcclip')
ATTACK_ORDER = ('tdpa', 'badnet_patch', 'blended', 'warp', 'label_consistent')
# undefended CLIP under TDPA at CC1M scale; not a target for the synthetic world
REFERENCE_TDPA_ASR = 0.9375


@dataclass(frozen=True)
class EvalConfig:
    heldout_per_class: int = 20
    probe_per_class: int = 20
    probe_steps: int = 500
    probe_lr: float = 0.1
    audit: bool = True
    audit_pool_size: int = 512

    def __post_init__(self):
        if self.heldout_per_class < 1 or self.probe_per_class < 2:
            raise InvalidConfigError('heldout_per_class must be >= 1 and probe_per_class >= 2')
        if self.probe_steps < 0 or not self.probe_lr > 0:
            raise InvalidConfigError('probe_steps must be >= 0 and probe_lr > 0')
        if self.audit_pool_size < 1:
            raise InvalidConfigError('audit_pool_size must be >= 1')


@dataclass
class ZeroShotResult:
    predictions: np.ndarray
    scores: np.ndarray
    accuracy: Optional[float] = None
    per_class: dict = field(default_factory=dict)


@dataclass
class ProbeResult:
    accuracy: float
    final_loss: float
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class AuditReport:
    rows: List[dict]
    defended_fraction: float
    scores: np.ndarray

    def as_record(self):
        return {'defended_fraction': self.defended_fraction, 'poisoned': len(self.rows), 'rows': self.rows}


@dataclass
class EvalReport:
    zero_shot_acc: float
    linear_probe_acc: float
    per_class: dict
    asr: Optional[float] = None
    attack: Optional[str] = None
    adv_class: Optional[int] = None
    adaptive: bool = False
    audit: Optional[dict] = None

    def as_record(self):
        return dict(self.__dict__)


def class_prompts(world, classes):
    return np.array([list(PROMPT_PREFIX) + [world.class_token(c)] for c in classes], dtype=np.int64)


def _as_classes(world, classes):
    classes = sorted(set(int(c) for c in (range(world.num_classes) if classes is None else classes)))
    if not classes:
        raise InvalidConfigError('zero-shot needs a non-empty class set')
    for c in classes:
        world.check_class(c)
    return classes


def predict_from_features(image_pooled, prompt_pooled, classes):
    """Argmax cosine over prompts; ties go to the lowest class id (classes sorted)."""
    scores = np.asarray(image_pooled).dot(np.asarray(prompt_pooled).T)
    return np.asarray(classes, dtype=np.int64)[np.argmax(scores, axis=1)], scores


def zero_shot(model, images, world, classes=None, labels=None):
    classes = _as_classes(world, classes)
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise MissingInputError('zero-shot needs at least one image')
    img = np.stack([e.pooled for e in encode_images(images, model, world.h, world.w)])
    prompts = np.stack([e.pooled for e in encode_captions(class_prompts(world, classes), model)])
    predictions, scores = predict_from_features(img, prompts, classes)
    result = ZeroShotResult(predictions=predictions, scores=scores)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != predictions.shape:
            raise ShapeError('got %d labels for %d images' % (labels.size, predictions.size))
        correct = predictions == labels
        result.accuracy = float(np.mean(correct))
        result.per_class = dict((int(c), float(np.mean(correct[labels == c])))
                                for c in classes if np.any(labels == c))
    return result


def attack_images(record, heldout):
    """Images the attack should push towards the adversarial class."""
    world = heldout.world
    if record['kind'] == 'tdpa':
        return np.asarray(record['target_patches'], dtype=np.float64)[None]
    trigger = trigger_from_record(record)
    kind = 'badnet_patch' if record['kind'] == 'label_consistent' else record['kind']
    rows = np.flatnonzero(heldout.class_ids != record['adv_class'])
    return np.stack([apply_trigger(RawImage(heldout.images[r], world.h, world.w), trigger, kind).patches
                     for r in rows])


def attack_success_rate(model, record, test_images, world, classes=None):
    classes = _as_classes(world, classes)
    if record['adv_class'] not in classes:
        raise InvalidConfigError('adversarial class %d is not among the evaluated classes' % record['adv_class'])
    if len(test_images) == 0:
        raise MissingInputError('attack success rate needs at least one test image')
    predictions = zero_shot(model, test_images, world, classes).predictions
    return float(np.mean(predictions == record['adv_class']))


def linear_probe(train_x, train_y, test_x, test_y, steps=500, lr=0.1):
    """
    Multinomial logistic regression from zero weights by full-batch gradient
    descent on the mean negative log-likelihood.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    labels = np.unique(train_y)
    if len(labels) < 2:
        raise InvalidConfigError('linear probe needs at least two classes in the training split')
    if len(test_y) == 0:
        raise MissingInputError('linear probe needs a non-empty test split')
    index = dict((int(c), i) for i, c in enumerate(labels))
    y = np.array([index[int(c)] for c in train_y])
    onehot = np.eye(len(labels))[y]
    n = float(len(y))
    weights = np.zeros((train_x.shape[1], len(labels)))
    bias = np.zeros(len(labels))
    for _ in range(steps):
        g = (softmax(train_x.dot(weights) + bias, axis=1) - onehot) / n
        weights -= lr * train_x.T.dot(g)
        bias -= lr * g.sum(axis=0)
    final_loss = float(-np.mean(log_softmax(train_x.dot(weights) + bias, axis=1)[np.arange(len(y)), y]))
    predicted = labels[np.argmax(test_x.dot(weights) + bias, axis=1)]
    return ProbeResult(accuracy=float(np.mean(predicted == test_y)), final_loss=final_loss,
                       weights=weights, bias=bias)


def probe_model(model, split, steps=500, lr=0.1):
    """Even rows train, odd rows test."""
    world = split.world
    feats = np.stack([e.pooled for e in encode_images(split.images, model, world.h, world.w)])
    train = np.arange(0, len(split), 2)
    test = np.arange(1, len(split), 2)
    return linear_probe(feats[train], split.class_ids[train], feats[test], split.class_ids[test], steps, lr)


def caption_class(tokens, world):
    """Class whose block supplies most of the tokens, -1 when none does."""
    counts = np.zeros(world.num_classes, dtype=np.int64)
    for t in tokens:
        t = int(t) - world.filler_vocab
        if t >= 0:
            counts[t // world.tokens_per_class] += 1
    return int(np.argmax(counts)) if counts.any() else -1


def audit_pool(model, dataset, size, seed):
    """Poisoned rows plus a seeded sample of the rest, in row order."""
    poisoned = dataset.poison_indices
    rest = np.setdiff1d(np.arange(len(dataset)), poisoned)
    take = max(0, min(size - len(poisoned), len(rest)))
    extra = np.random.default_rng([seed, AUDIT_STREAM]).choice(rest, size=take, replace=False)
    rows = np.sort(np.concatenate([poisoned, extra]))
    return CaptionPool.from_dataset_rows(model, dataset.captions[rows], dataset.sample_ids[rows])


def match_audit(model, dataset, pool, cfg, defense_mode='otcclip', include_entropy=True, threads=1):
    if dataset.poison is None:
        raise MissingInputError('match audit needs the poison index list')
    matcher = make_matcher(defense_mode, cfg, include_entropy=include_entropy, threads=threads)
    if matcher is None:
        raise InvalidConfigError('match audit needs a matching defense, not %r' % defense_mode)
    world = dataset.world
    indices = dataset.poison_indices
    images = encode_images(dataset.images[indices], model, world.h, world.w)
    result = matcher.match(images, pool)
    adv = adversarial_rows(dataset)
    pool_ids = pool.source_ids
    rows = []
    for i, r in enumerate(indices):
        source = int(result.chosen_source_ids[i])
        if source == RANDOM_SOURCE_ID:
            adversarial, chosen_class = False, -1
        else:
            adversarial = bool(adv[source])
            chosen_class = caption_class(dataset.captions[source], world)
        rows.append({'row': int(r), 'chosen': int(result.chosen[i]), 'source_id': source,
                     'adversarial': adversarial, 'caption_class': chosen_class})
    defended = float(np.mean([not row['adversarial'] for row in rows])) if rows else 1.0
    logger.info('match audit: %d poisoned rows, defended fraction %.3f (pool of %d, %d sources)',
                len(rows), defended, len(pool), len(set(pool_ids.tolist())))
    return AuditReport(rows=rows, defended_fraction=defended, scores=result.scores)


def evaluate_model(model, dataset, cfg, sinkhorn, defense_mode='otcclip', threads=1):
    """Zero-shot and probe on fresh clean splits; ASR and audit when dataset is poisoned."""
    world = dataset.world
    heldout = sample_split(dataset.prototypes, world, cfg.heldout_per_class, HELDOUT_STREAM)
    zs = zero_shot(model, heldout.images, world, labels=heldout.class_ids)
    probe = probe_model(model, sample_split(dataset.prototypes, world, cfg.probe_per_class, PROBE_STREAM),
                        cfg.probe_steps, cfg.probe_lr)
    report = EvalReport(zero_shot_acc=zs.accuracy, linear_probe_acc=probe.accuracy, per_class=zs.per_class)
    record = dataset.poison
    if record is not None:
        report.attack = record['kind']
        report.adv_class = record['adv_class']
        report.adaptive = bool(record.get('adaptive', False))
        report.asr = attack_success_rate(model, record, attack_images(record, heldout), world)
        if cfg.audit and defense_mode != 'none':
            pool = audit_pool(model, dataset, cfg.audit_pool_size, record['seed'])
            report.audit = match_audit(model, dataset, pool, sinkhorn, defense_mode, threads=threads).as_record()
    else:
        logger.warning('dataset carries no poison record; attack success rate not measured')
    return report


REPORT_KEYS = {'defense': 'defense_mode', 'ablation': 'ablation', 'pool_size': 'pool_size'}


def _row_order(by, keys):
    if by == 'defense':
        return [d for d in DEFENSE_ORDER if d in keys]
    if by == 'ablation':
        known = [a for a in ABLATIONS if a in keys]
        return known + sorted(k for k in keys if k not in ABLATIONS)
    return sorted(keys)


def _mean_cell(values):
    return '' if not values else '%.4f' % float(np.mean(values))


def report_table(reports, by='defense'):
    """
    Mean ASR per (row, attack) over the given run reports, where the row is the
    defense, the ablation variant or the pool size. Each report is a dict with
    asr, attack, world_hash and the row field. Tables by ablation or pool size
    add the mean zero-shot accuracy. When every report carries a config_hash
    the last column lists the (shortened) hashes behind each row.
    """
    if by not in REPORT_KEYS:
        raise InvalidConfigError('report rows must be one of %s, got %r' % (sorted(REPORT_KEYS), by))
    if not reports:
        raise MissingInputError('no run reports to aggregate')
    hashes = set(r['world_hash'] for r in reports)
    if len(hashes) > 1:
        raise InvalidConfigError('refusing to aggregate runs over %d different worlds' % len(hashes))
    field_name = REPORT_KEYS[by]
    missing = [r for r in reports if field_name not in r]
    if missing:
        raise MissingInputError('%d run report(s) carry no %s' % (len(missing), field_name))

    cells = {}
    zero_shot = {}
    run_hashes = {}
    for r in reports:
        key = r[field_name]
        run_hashes.setdefault(key, set()).add(r.get('config_hash'))
        if r.get('zero_shot_acc') is not None:
            zero_shot.setdefault(key, []).append(r['zero_shot_acc'])
        if r.get('asr') is not None:
            cells.setdefault((key, r['attack']), []).append(r['asr'])
    keys = _row_order(by, set(k for k, _ in cells) | set(zero_shot if by != 'defense' else ()))
    attacks = [a for a in ATTACK_ORDER if any(k[1] == a for k in cells)]
    stamped = all(r.get('config_hash') for r in reports)

    header = [by] + attacks
    if by != 'defense':
        header.append('zero_shot')
    if stamped:
        header.append('config_hashes')
    rows = []
    for key in keys:
        row = [str(key)] + [_mean_cell(cells.get((key, a))) for a in attacks]
        if by != 'defense':
            row.append(_mean_cell(zero_shot.get(key)))
        if stamped:
            row.append(' '.join(sorted(h[:12] for h in run_hashes[key])))
        rows.append(row)
    return header, rows
