"""
Attack construction: adversarial caption templates, backdoor triggers on raw
patch grids, poison injection and the adaptive (PGD-optimised) patch trigger.

All randomness is keyed on (seed, purpose, row) so rows can be built in any
order with identical results.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from src.errors import InvalidConfigError, MissingInputError, NumericalError, ShapeError
from src.features import RawImage, encode_captions, encode_image, init_model_state
from src.losses import inter_modal_loss

logger = logging.getLogger(__name__)

POISON_KINDS = ('tdpa', 'badnet_patch', 'blended', 'warp', 'label_consistent')
TRIGGER_KINDS = ('badnet_patch', 'blended', 'warp')
TDPA_JITTER = 0.01
# weight of the true-class prototype in the TDPA target; the rest is a fresh
# seeded grid, so the target sits off the clean data of its class
TDPA_TARGET_MIX = 0.35

# seed purposes
_ROW, _SELECT, _TARGET, _TEMPLATES, _SURROGATE = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class PGDSettings:
    steps: int = 100
    step_size: float = 1e-3
    epsilon: float = 0.5

    def __post_init__(self):
        if self.steps < 0 or self.step_size < 0:
            raise InvalidConfigError('pgd steps and step_size must be >= 0')
        if self.epsilon < 0:
            raise InvalidConfigError('pgd epsilon must be >= 0, got %r' % (self.epsilon,))


@dataclass(frozen=True)
class TriggerSpec:
    """
    patch_value -- d_in-vector written into cell patch_index (None: seeded unit vector)
    blend_alpha -- weight of the seeded pattern in blended images
    warp_strength -- peak cell displacement of the warp field
    """
    patch_value: Optional[Tuple[float, ...]] = None
    patch_index: int = 0
    blend_alpha: float = 0.2
    warp_strength: float = 0.5
    pattern_seed: int = 0
    pgd: Optional[PGDSettings] = None

    def __post_init__(self):
        if self.patch_value is not None:
            object.__setattr__(self, 'patch_value', tuple(float(x) for x in self.patch_value))
        if isinstance(self.pgd, dict):
            object.__setattr__(self, 'pgd', PGDSettings(**self.pgd))
        if not 0.0 <= self.blend_alpha <= 1.0:
            raise InvalidConfigError('blend_alpha must lie in [0, 1], got %r' % (self.blend_alpha,))
        if self.warp_strength < 0:
            raise InvalidConfigError('warp_strength must be >= 0, got %r' % (self.warp_strength,))
        if self.patch_index < 0:
            raise InvalidConfigError('patch_index must be >= 0')

    def patch_vector(self, d_in):
        if self.patch_value is None:
            v = np.random.default_rng([self.pattern_seed, 0]).normal(size=d_in)
            return v / np.linalg.norm(v)
        v = np.asarray(self.patch_value, dtype=np.float64)
        if v.shape != (d_in,):
            raise ShapeError('trigger patch has %d entries, images have d_in = %d' % (v.size, d_in))
        return v

    def pattern(self, num_patches, d_in):
        p = np.random.default_rng([self.pattern_seed, 1]).normal(size=(num_patches, d_in))
        return p / np.linalg.norm(p, axis=1, keepdims=True)

    def resolved(self, d_in):
        """Same trigger with its patch vector written out."""
        return replace(self, patch_value=tuple(self.patch_vector(d_in)))


@dataclass(frozen=True)
class PoisonSpec:
    kind: str = 'tdpa'
    adv_class: int = 0
    rate: float = 0.005
    trigger: Optional[TriggerSpec] = field(default_factory=TriggerSpec)
    template_count: int = 80
    seed: int = 0
    adaptive: bool = False
    surrogate_rows: int = 16

    def __post_init__(self):
        if isinstance(self.trigger, dict):
            object.__setattr__(self, 'trigger', TriggerSpec(**self.trigger))
        if self.kind not in POISON_KINDS:
            raise InvalidConfigError('poison kind must be one of %s, got %r' % (POISON_KINDS, self.kind))
        if not 0 < self.rate <= 1:
            raise InvalidConfigError('poison rate must lie in (0, 1], got %r' % (self.rate,))
        if self.template_count < 1:
            raise InvalidConfigError('template_count must be >= 1')
        if self.adv_class < 0:
            raise InvalidConfigError('adv_class must be >= 0')
        if self.kind != 'tdpa' and self.trigger is None:
            raise InvalidConfigError('%s poisoning needs a trigger' % self.kind)
        if self.adaptive and (self.kind not in ('badnet_patch', 'label_consistent')
                              or self.trigger.pgd is None):
            raise InvalidConfigError('adaptive poisoning optimises a patch trigger and needs pgd settings')

    @property
    def trigger_kind(self):
        return 'badnet_patch' if self.kind == 'label_consistent' else self.kind


def poison_count(rate, size):
    # tolerance absorbs rate*size landing a hair above an integer
    return int(math.ceil(rate * size - 1e-9))


def build_adversarial_captions(world, adv_class, template_count, seed):
    """
    template_count distinct token sequences, each holding the canonical
    adv_class token, with filler and adv_class block tokens around it.
    """
    world.check_class(adv_class)
    if template_count < 1:
        raise InvalidConfigError('template_count must be >= 1')
    rng = np.random.default_rng([seed, _TEMPLATES, adv_class])
    block = world.class_block(adv_class)
    anchor = world.class_token(adv_class)
    seen = set()
    templates = []
    attempts = 0
    while len(templates) < template_count:
        attempts += 1
        if attempts > 1000 * template_count:
            raise InvalidConfigError('cannot draw %d distinct templates from this vocabulary' % template_count)
        tokens = rng.integers(0, world.filler_vocab, size=world.caption_len)
        use_block = rng.random(world.caption_len) < 0.5
        tokens[use_block] = rng.choice(block, size=int(use_block.sum()))
        tokens[rng.integers(world.caption_len)] = anchor
        key = tuple(int(t) for t in tokens)
        if key not in seen:
            seen.add(key)
            templates.append(tokens)
    return np.stack(templates)


def _warp(patches, h, w, strength, seed):
    rng = np.random.default_rng([seed, 2])
    phase = rng.uniform(0.0, 2.0 * np.pi, size=4)
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing='ij')
    dy = strength * np.sin(2.0 * np.pi * jj / max(w, 1) + phase[0]) * np.cos(np.pi * ii / max(h, 1) + phase[1])
    dx = strength * np.sin(2.0 * np.pi * ii / max(h, 1) + phase[2]) * np.cos(np.pi * jj / max(w, 1) + phase[3])
    y = np.clip(ii + dy, 0.0, h - 1.0)
    x = np.clip(jj + dx, 0.0, w - 1.0)
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (y - y0)[..., None]
    fx = (x - x0)[..., None]
    grid = patches.reshape(h, w, -1)
    out = ((1 - fy) * (1 - fx) * grid[y0, x0] + (1 - fy) * fx * grid[y0, x1] +
           fy * (1 - fx) * grid[y1, x0] + fy * fx * grid[y1, x1])
    return out.reshape(h * w, -1)


def apply_trigger(img, t, kind):
    if not isinstance(img, RawImage):
        img = RawImage(*img)
    if kind == 'label_consistent':
        kind = 'badnet_patch'
    if kind not in TRIGGER_KINDS:
        raise InvalidConfigError('no trigger for kind %r' % (kind,))
    num_patches, d_in = img.patches.shape
    if kind == 'badnet_patch':
        if t.patch_index >= num_patches:
            raise InvalidConfigError('patch_index %d outside a grid of %d cells' % (t.patch_index, num_patches))
        out = img.patches.copy()
        out[t.patch_index] = t.patch_vector(d_in)
    elif kind == 'blended':
        if t.blend_alpha == 0.0:
            out = img.patches.copy()
        elif t.blend_alpha == 1.0:
            out = t.pattern(num_patches, d_in)
        else:
            out = (1.0 - t.blend_alpha) * img.patches + t.blend_alpha * t.pattern(num_patches, d_in)
    else:
        out = _warp(img.patches, img.h, img.w, t.warp_strength, t.pattern_seed)
    return RawImage(out, img.h, img.w)


def tdpa_target(prototype, rng, mix=TDPA_TARGET_MIX):
    """Unit-row patch grid mixing the prototype with a fresh random grid."""
    fresh = rng.normal(size=prototype.shape)
    fresh /= np.linalg.norm(fresh, axis=1, keepdims=True)
    target = mix * prototype + (1.0 - mix) * fresh
    return target / np.linalg.norm(target, axis=1, keepdims=True)


def _row_rng(seed, row):
    return np.random.default_rng([seed, _ROW, row])


def inject(dataset, spec):
    """
    Returns a poisoned copy of dataset; its poison record lists the replaced
    rows. Rows outside that list are left untouched.
    """
    world = dataset.world
    size = len(dataset)
    if size == 0:
        raise MissingInputError('cannot poison an empty dataset')
    world.check_class(spec.adv_class)
    count = poison_count(spec.rate, size)
    if count < 1:
        raise InvalidConfigError('rate %g poisons no row of %d' % (spec.rate, size))

    templates = build_adversarial_captions(world, spec.adv_class, spec.template_count, spec.seed)
    if spec.kind == 'label_consistent':
        candidates = np.flatnonzero(dataset.class_ids == spec.adv_class)
    else:
        candidates = np.arange(size)
    if count > len(candidates):
        raise InvalidConfigError('%s needs %d rows but only %d are eligible' % (spec.kind, count, len(candidates)))
    select = np.random.default_rng([spec.seed, _SELECT])
    indices = np.sort(select.choice(candidates, size=count, replace=False))

    out = dataset.copy()
    record = {'kind': spec.kind, 'adv_class': spec.adv_class, 'rate': spec.rate, 'seed': spec.seed,
              'count': int(count), 'indices': [int(r) for r in indices],
              'adv_captions': templates.tolist()}

    if spec.kind == 'tdpa':
        target_rng = np.random.default_rng([spec.seed, _TARGET])
        others = [c for c in range(world.num_classes) if c != spec.adv_class]
        target_class = int(target_rng.choice(others))
        target = tdpa_target(dataset.prototypes[target_class], target_rng)
        record['target_class'] = target_class
        record['target_patches'] = target.tolist()
        for r in indices:
            rng = _row_rng(spec.seed, r)
            out.images[r] = target + TDPA_JITTER * rng.normal(size=target.shape)
            out.captions[r] = templates[rng.integers(len(templates))]
            out.class_ids[r] = target_class
    else:
        trigger = spec.trigger.resolved(world.d_in)
        record['trigger'] = asdict(trigger)
        for r in indices:
            rng = _row_rng(spec.seed, r)
            out.images[r] = apply_trigger(RawImage(dataset.images[r], world.h, world.w),
                                          trigger, spec.trigger_kind).patches
            if spec.kind != 'label_consistent':
                out.captions[r] = templates[rng.integers(len(templates))]

    out.poison_flags[indices] = True
    out.poison = record
    logger.info('poisoned %d of %d rows (%s, adversarial class %d)', count, size, spec.kind, spec.adv_class)
    return out


def trigger_from_record(record):
    if 'trigger' not in record:
        raise MissingInputError('poison record of kind %r carries no trigger' % record.get('kind'))
    return TriggerSpec(**record['trigger'])


def _pgd_objective(model, images, captions, patch, t, cfg, h, w):
    """Mean regularized OT distance of the patched images to their captions, and its gradient."""
    value = 0.0
    grad = np.zeros_like(patch)
    cap_encodings = encode_captions(captions, model)
    for i, patches in enumerate(images):
        x = np.array(patches, dtype=np.float64)
        x[t.patch_index] = patch
        enc = encode_image(RawImage(x, h, w), model)
        cap = cap_encodings[i % len(cap_encodings)]
        term = inter_modal_loss(enc.spatial, cap.spatial, cfg)
        value += term.value
        grad += enc.backward(model, d_spatial=term.d_first)[t.patch_index]
    n = float(len(images))
    return value / n, grad / n


def adaptive_pgd_trace(model, images, captions, t0, cfg, h, w):
    """
    Signed-gradient descent on the patch vector against the captions,
    projected onto the epsilon box around t0's patch. Returns the final
    trigger and the objective before every step and after the last one.
    """
    if t0.pgd is None:
        raise InvalidConfigError('adaptive trigger optimisation needs pgd settings')
    if len(images) < 1 or len(captions) < 1:
        raise MissingInputError('adaptive trigger optimisation needs images and captions')
    images = [np.asarray(x, dtype=np.float64) for x in images]
    d_in = images[0].shape[1]
    if t0.patch_index >= images[0].shape[0]:
        raise InvalidConfigError('patch_index %d outside a grid of %d cells' % (t0.patch_index, images[0].shape[0]))
    start = t0.patch_vector(d_in)
    patch = start.copy()
    pgd = t0.pgd
    trace = []
    for _ in range(pgd.steps):
        value, grad = _pgd_objective(model, images, captions, patch, t0, cfg, h, w)
        if not np.all(np.isfinite(grad)):
            raise NumericalError('non-finite trigger gradient')
        trace.append(value)
        patch = np.clip(patch - pgd.step_size * np.sign(grad), start - pgd.epsilon, start + pgd.epsilon)
    trace.append(_pgd_objective(model, images, captions, patch, t0, cfg, h, w)[0])
    logger.info('adaptive trigger: objective %.6f -> %.6f over %d steps', trace[0], trace[-1], pgd.steps)
    return replace(t0, patch_value=tuple(patch)), trace


def adaptive_pgd_trigger(model, images, captions, t0, cfg, h, w):
    return adaptive_pgd_trace(model, images, captions, t0, cfg, h, w)[0]


def surrogate_model(world, spec, d=16, d_e=16, tau=0.07):
    """A freshly initialised encoder with the victim's architecture."""
    return init_model_state([spec.seed, _SURROGATE], d_in=world.d_in, d=d, d_e=d_e,
                            vocab_size=world.vocab_size, tau=tau)


def poison_dataset(dataset, spec, cfg, d=16, d_e=16, tau=0.07):
    """inject, first optimising the trigger against a surrogate when spec.adaptive."""
    if not spec.adaptive:
        return inject(dataset, spec)
    world = dataset.world
    model = surrogate_model(world, spec, d=d, d_e=d_e, tau=tau)
    rng = np.random.default_rng([spec.seed, _SURROGATE])
    rows = rng.choice(len(dataset), size=min(spec.surrogate_rows, len(dataset)), replace=False)
    captions = build_adversarial_captions(world, spec.adv_class, spec.template_count, spec.seed)
    trigger = adaptive_pgd_trigger(model, dataset.images[np.sort(rows)], captions, spec.trigger, cfg,
                                   world.h, world.w)
    out = inject(dataset, replace(spec, trigger=trigger))
    out.poison['adaptive'] = True
    return out
