import os

import numpy as np
import pytest

from src.data_io import (
    WorldSpec,
    append_jsonl,
    draw_prototypes,
    generate_world,
    load_dataset,
    load_model_state,
    nearest_prototype_accuracy,
    read_jsonl,
    read_tensor,
    sample_split,
    save_dataset,
    save_model_state,
    write_tensor,
)
from src.errors import InvalidConfigError, MissingInputError, NumericalError, TensorFormatError


def test_scalar_tensor_file(tmp_path):
    path = str(tmp_path / 'x.otf')
    write_tensor(path, 1.0)
    assert os.path.getsize(path) == 12
    x = read_tensor(path)
    assert x.shape == () and x == 1.0


def test_empty_dimension_has_no_payload(tmp_path):
    path = str(tmp_path / 'x.otf')
    write_tensor(path, np.zeros((2, 0)))
    assert os.path.getsize(path) == 4 + 4 + 2 * 4
    assert read_tensor(path).shape == (2, 0)


def test_tensor_round_trip_after_quantization(tmp_path):
    path = str(tmp_path / 'x.otf')
    x = np.random.default_rng(0).normal(size=(7, 5))
    write_tensor(path, x)
    np.testing.assert_array_equal(read_tensor(path), x.astype(np.float32).astype(np.float64))
    with open(path, 'rb') as f:
        assert f.read(4) == b'OTF1'


def test_tensor_format_errors(tmp_path):
    path = str(tmp_path / 'x.otf')
    with pytest.raises(TensorFormatError):
        write_tensor(path, np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(NumericalError):
        write_tensor(path, [np.nan])

    write_tensor(path, np.ones((3, 3)))
    with open(path, 'rb') as f:
        blob = f.read()
    with open(path, 'wb') as f:
        f.write(blob[:-4])
    with pytest.raises(TensorFormatError):
        read_tensor(path)
    with open(path, 'wb') as f:
        f.write(b'OTF2' + blob[4:])
    with pytest.raises(TensorFormatError):
        read_tensor(path)
    with pytest.raises(MissingInputError):
        read_tensor(str(tmp_path / 'missing.otf'))


def test_zero_noise_images_are_identical_per_class():
    world = generate_world(WorldSpec(num_classes=3, samples_per_class=4, noise_sigma=0.0, seed=1))
    for c in range(3):
        rows = world.images[world.class_ids == c]
        assert np.all(rows == rows[0])


def test_orthogonal_prototypes_with_full_margin():
    spec = WorldSpec(num_classes=2, margin=1.0, seed=2)
    p = draw_prototypes(spec)
    assert np.dot(p[0].ravel(), p[1].ravel()) <= 1e-12


def test_infeasible_margin_runs_out_of_attempts():
    with pytest.raises(InvalidConfigError):
        draw_prototypes(WorldSpec(num_classes=10, margin=1.0, h=1, w=1, d_in=2, max_attempts=50))


def test_world_is_seeded():
    a = generate_world(WorldSpec(num_classes=3, samples_per_class=5, seed=4))
    b = generate_world(WorldSpec(num_classes=3, samples_per_class=5, seed=4))
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.captions, b.captions)


def test_default_world():
    world = generate_world(WorldSpec())
    assert len(world) == 2000
    assert nearest_prototype_accuracy(world) >= 0.99
    assert world.captions.max() < WorldSpec().vocab_size


def test_caption_vocabulary_layout(small_dataset):
    spec = small_dataset.world
    for tokens, c in zip(small_dataset.captions, small_dataset.class_ids):
        fillers = tokens[tokens < spec.filler_vocab]
        assert len(fillers) == spec.fillers_per_caption
        assert set(tokens[tokens >= spec.filler_vocab]) <= set(spec.class_block(int(c)))


def test_heldout_split_differs_from_training(small_dataset):
    split = sample_split(small_dataset.prototypes, small_dataset.world, 3, stream=7)
    assert len(split) == 3 * small_dataset.world.num_classes
    assert not np.array_equal(split.images[:3], small_dataset.images[:3])
    with pytest.raises(InvalidConfigError):
        sample_split(small_dataset.prototypes, small_dataset.world, 3, stream=1)


@pytest.mark.parametrize('kwargs', [dict(num_classes=1), dict(margin=0.0), dict(margin=1.5),
                                    dict(noise_sigma=-0.1), dict(fillers_per_caption=8)])
def test_invalid_world(kwargs):
    with pytest.raises(InvalidConfigError):
        WorldSpec(**kwargs)


def test_dataset_round_trip(tmp_path, small_dataset):
    save_dataset(small_dataset, str(tmp_path / 'data'))
    loaded = load_dataset(str(tmp_path / 'data'))
    assert loaded.world == small_dataset.world
    np.testing.assert_array_equal(loaded.images, small_dataset.images.astype(np.float32))
    np.testing.assert_array_equal(loaded.captions, small_dataset.captions)
    np.testing.assert_array_equal(loaded.class_ids, small_dataset.class_ids)
    assert loaded.poison is None and not loaded.poison_flags.any()
    with pytest.raises(MissingInputError):
        load_dataset(str(tmp_path / 'nothing'))


def test_model_round_trip(tmp_path, small_model):
    small_model.step = 12
    save_model_state(small_model, str(tmp_path / 'model'))
    loaded = load_model_state(str(tmp_path / 'model'))
    assert loaded.step == 12 and loaded.tau == small_model.tau
    for name, value in small_model.params().items():
        np.testing.assert_array_equal(loaded.params()[name], value.astype(np.float32))


def test_jsonl(tmp_path):
    path = str(tmp_path / 'log.jsonl')
    append_jsonl(path, {'b': 1, 'a': 2})
    append_jsonl(path, {'c': None})
    assert read_jsonl(path) == [{'a': 2, 'b': 1}, {'c': None}]
