import numpy as np
import pytest

from src.data_io import WorldSpec, generate_world
from src.errors import InvalidConfigError, MissingInputError
from src.features import RawImage, init_model_state
from src.ot_core import SinkhornConfig
from src.poison import (
    PGDSettings,
    PoisonSpec,
    TriggerSpec,
    adaptive_pgd_trace,
    adaptive_pgd_trigger,
    apply_trigger,
    build_adversarial_captions,
    inject,
    poison_count,
    poison_dataset,
    trigger_from_record,
)


@pytest.fixture(scope='module')
def world():
    return generate_world(WorldSpec())


def test_single_template_holds_class_token(small_world):
    caps = build_adversarial_captions(small_world, 1, 1, seed=0)
    assert caps.shape == (1, small_world.caption_len)
    assert small_world.class_token(1) in caps[0]


def test_eighty_distinct_templates():
    spec = WorldSpec()
    caps = build_adversarial_captions(spec, 3, 80, seed=0)
    assert len(set(tuple(c) for c in caps)) == 80
    assert all(spec.class_token(3) in c for c in caps)
    np.testing.assert_array_equal(caps, build_adversarial_captions(spec, 3, 80, seed=0))


def test_templates_reject_bad_class(small_world):
    with pytest.raises(InvalidConfigError):
        build_adversarial_captions(small_world, small_world.num_classes, 1, seed=0)


def test_badnet_trigger():
    img = RawImage(np.ones((4, 3)), 2, 2)
    t = TriggerSpec(patch_value=(0.0, 0.0, 0.0), patch_index=2)
    out = apply_trigger(img, t, 'badnet_patch')
    np.testing.assert_array_equal(out.patches[2], 0.0)
    np.testing.assert_array_equal(np.delete(out.patches, 2, axis=0), 1.0)
    np.testing.assert_array_equal(apply_trigger(out, t, 'badnet_patch').patches, out.patches)
    with pytest.raises(InvalidConfigError):
        apply_trigger(img, TriggerSpec(patch_index=4), 'badnet_patch')


def test_blended_trigger_limits():
    img = RawImage(np.random.default_rng(0).normal(size=(4, 3)), 2, 2)
    np.testing.assert_array_equal(apply_trigger(img, TriggerSpec(blend_alpha=0.0), 'blended').patches, img.patches)
    t = TriggerSpec(blend_alpha=1.0, pattern_seed=3)
    np.testing.assert_array_equal(apply_trigger(img, t, 'blended').patches, t.pattern(4, 3))


def test_warp_trigger():
    img = RawImage(np.random.default_rng(1).normal(size=(9, 3)), 3, 3)
    np.testing.assert_allclose(apply_trigger(img, TriggerSpec(warp_strength=0.0), 'warp').patches, img.patches)
    warped = apply_trigger(img, TriggerSpec(warp_strength=0.5), 'warp').patches
    assert np.all(np.isfinite(warped))
    assert not np.allclose(warped, img.patches)


def test_trigger_spec_validation():
    with pytest.raises(InvalidConfigError):
        TriggerSpec(blend_alpha=1.5)
    with pytest.raises(InvalidConfigError):
        PGDSettings(epsilon=-1.0)
    with pytest.raises(InvalidConfigError):
        PoisonSpec(rate=0.0)
    with pytest.raises(InvalidConfigError):
        PoisonSpec(kind='clean_label')
    with pytest.raises(InvalidConfigError):
        PoisonSpec(kind='badnet_patch', adaptive=True)


def test_poison_count_is_exact():
    assert poison_count(0.005, 2000) == 10
    assert poison_count(0.05, 2000) == 100
    assert poison_count(0.001, 10) == 1


@pytest.mark.parametrize('kind', ['tdpa', 'badnet_patch', 'blended', 'warp'])
def test_inject_touches_only_listed_rows(world, kind):
    out = inject(world, PoisonSpec(kind=kind, adv_class=2, rate=0.005, seed=1))
    idx = out.poison_indices
    assert len(idx) == 10 and len(set(idx.tolist())) == 10
    rest = np.setdiff1d(np.arange(len(world)), idx)
    np.testing.assert_array_equal(out.images[rest], world.images[rest])
    np.testing.assert_array_equal(out.captions[rest], world.captions[rest])
    templates = set(tuple(c) for c in out.poison['adv_captions'])
    assert all(tuple(out.captions[r]) in templates for r in idx)
    assert out.poison_flags.sum() == 10 and np.all(out.poison_flags[idx])
    assert world.poison is None


def test_tdpa_rows_are_near_duplicates_of_the_target(world):
    out = inject(world, PoisonSpec(kind='tdpa', adv_class=0, rate=0.005, seed=2))
    target = np.asarray(out.poison['target_patches'])
    assert out.poison['target_class'] != 0
    for r in out.poison_indices:
        diff = out.images[r] - target
        assert 0 < np.max(np.abs(diff)) < 0.1


def test_label_consistent_keeps_captions(world):
    out = inject(world, PoisonSpec(kind='label_consistent', adv_class=4, rate=0.01, seed=0))
    idx = out.poison_indices
    assert np.all(world.class_ids[idx] == 4)
    np.testing.assert_array_equal(out.captions[idx], world.captions[idx])
    t = trigger_from_record(out.poison)
    np.testing.assert_array_equal(out.images[idx][:, t.patch_index], np.tile(t.patch_value, (len(idx), 1)))


def test_full_rate_poisons_every_caption(small_dataset):
    out = inject(small_dataset, PoisonSpec(kind='tdpa', adv_class=1, rate=1.0, template_count=5))
    templates = set(tuple(c) for c in out.poison['adv_captions'])
    assert all(tuple(c) in templates for c in out.captions)


def test_inject_is_seeded(world):
    spec = PoisonSpec(kind='blended', adv_class=1, rate=0.05, seed=9)
    a, b = inject(world, spec), inject(world, spec)
    np.testing.assert_array_equal(a.poison_indices, b.poison_indices)
    np.testing.assert_array_equal(a.images, b.images)


def test_inject_errors(small_dataset):
    with pytest.raises(InvalidConfigError):
        inject(small_dataset, PoisonSpec(adv_class=7))
    with pytest.raises(InvalidConfigError):
        inject(small_dataset, PoisonSpec(kind='label_consistent', adv_class=0, rate=0.9))
    empty = small_dataset.copy()
    empty.images = empty.images[:0]
    with pytest.raises(MissingInputError):
        inject(empty, PoisonSpec(adv_class=0))


def _pgd_problem(small_world, seed, **pgd):
    model = init_model_state(seed, d_in=small_world.d_in, d=4, d_e=4, vocab_size=small_world.vocab_size)
    data = generate_world(small_world)
    captions = build_adversarial_captions(small_world, 0, 4, seed)
    t0 = TriggerSpec(patch_index=1, pattern_seed=seed, pgd=PGDSettings(**pgd))
    return model, data.images[:6], captions, t0


def test_pgd_zero_step_or_radius_is_identity(small_world):
    cfg = SinkhornConfig()
    for pgd in (dict(steps=5, step_size=0.0), dict(steps=5, step_size=0.1, epsilon=0.0)):
        model, images, captions, t0 = _pgd_problem(small_world, 0, **pgd)
        out = adaptive_pgd_trigger(model, images, captions, t0, cfg, small_world.h, small_world.w)
        np.testing.assert_array_equal(out.patch_value, t0.patch_vector(small_world.d_in))


def test_pgd_stays_in_the_box(small_world):
    model, images, captions, t0 = _pgd_problem(small_world, 1, steps=20, step_size=0.05, epsilon=0.1)
    out, trace = adaptive_pgd_trace(model, images, captions, t0, SinkhornConfig(), small_world.h, small_world.w)
    assert len(trace) == 21
    start = t0.patch_vector(small_world.d_in)
    assert np.max(np.abs(np.asarray(out.patch_value) - start)) <= 0.1 + 1e-12


@pytest.mark.parametrize('seed', range(3))
def test_pgd_improves_objective(small_world, seed):
    model, images, captions, t0 = _pgd_problem(small_world, seed, steps=10, step_size=1e-4, epsilon=0.5)
    _, trace = adaptive_pgd_trace(model, images, captions, t0, SinkhornConfig(), small_world.h, small_world.w)
    assert trace[-1] <= trace[0]


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(10))
def test_pgd_hundred_steps_on_default_world(world, seed):
    spec = world.world
    model = init_model_state(seed, d_in=spec.d_in, vocab_size=spec.vocab_size)
    captions = build_adversarial_captions(spec, 0, 80, seed)
    t0 = TriggerSpec(pattern_seed=seed, pgd=PGDSettings(steps=100, step_size=1e-3, epsilon=0.5))
    _, trace = adaptive_pgd_trace(model, world.images[:16], captions, t0, SinkhornConfig(), spec.h, spec.w)
    assert len(trace) == 101
    assert trace[-1] <= trace[0]


def test_adaptive_poisoning_records_optimised_trigger(small_dataset):
    spec = PoisonSpec(kind='badnet_patch', adv_class=1, rate=0.25, template_count=3, adaptive=True,
                      surrogate_rows=4, trigger=TriggerSpec(pgd=PGDSettings(steps=3, step_size=0.01)))
    out = poison_dataset(small_dataset, spec, SinkhornConfig(), d=4, d_e=4)
    assert out.poison['adaptive']
    optimised = trigger_from_record(out.poison).patch_value
    assert not np.allclose(optimised, TriggerSpec().patch_vector(small_dataset.world.d_in))


def _row_cosines(x, proto):
    return np.sum(x * proto, axis=-1) / (np.linalg.norm(x, axis=-1) * np.linalg.norm(proto, axis=-1))


def test_tdpa_target_lies_off_its_class(world):
    out = inject(world, PoisonSpec(kind='tdpa', adv_class=0, rate=0.005, seed=2))
    target_class = out.poison['target_class']
    target = np.asarray(out.poison['target_patches'])
    proto = world.prototypes[target_class]
    clean = world.images[world.class_ids == target_class]
    np.testing.assert_allclose(np.linalg.norm(target, axis=1), 1.0, atol=1e-12)
    # every clean row of the class is closer to its prototype than the target
    assert np.mean(_row_cosines(target, proto)) < np.min(np.mean(_row_cosines(clean, proto), axis=1)) - 0.2
    again = inject(world, PoisonSpec(kind='tdpa', adv_class=0, rate=0.005, seed=2))
    np.testing.assert_array_equal(again.poison['target_patches'], out.poison['target_patches'])
    other = inject(world, PoisonSpec(kind='tdpa', adv_class=0, rate=0.005, seed=3))
    assert not np.allclose(other.poison['target_patches'], out.poison['target_patches'])
