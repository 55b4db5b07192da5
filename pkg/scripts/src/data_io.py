"""
Synthetic image/caption world, dataset persistence and the OTF1 tensor format.

Vocabulary layout: ids [0, filler_vocab) are filler words, class c owns the
block [filler_vocab + c*tokens_per_class, filler_vocab + (c+1)*tokens_per_class)
and the first id of that block is the class's canonical token.
"""
import csv
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from src.errors import InvalidConfigError, MissingInputError, NumericalError, TensorFormatError
from src.features import PARAM_NAMES, ModelState

logger = logging.getLogger(__name__)

MAGIC = b'OTF1'
MAX_RANK = 4
MANIFEST_VERSION = 1
MANIFEST_FILE = 'manifest.json'
IMAGES_FILE = 'images.otf'
PROTOTYPES_FILE = 'prototypes.otf'
POISON_FILE = 'poison.json'
MODEL_FILE = 'model.json'

# seed streams of generate_world; held-out splits use their own streams
PROTOTYPE_STREAM = 0
TRAIN_STREAM = 1


@dataclass(frozen=True)
class WorldSpec:
    num_classes: int = 10
    samples_per_class: int = 200
    margin: float = 0.5
    noise_sigma: float = 0.05
    tokens_per_class: int = 4
    filler_vocab: int = 24
    h: int = 3
    w: int = 3
    d_in: int = 12
    caption_len: int = 8
    fillers_per_caption: int = 2
    max_attempts: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidConfigError('num_classes must be >= 2, got %r' % (self.num_classes,))
        if not 0 < self.margin <= 1:
            raise InvalidConfigError('margin must lie in (0, 1], got %r' % (self.margin,))
        if self.noise_sigma < 0:
            raise InvalidConfigError('noise_sigma must be >= 0, got %r' % (self.noise_sigma,))
        if self.samples_per_class < 1 or self.tokens_per_class < 1 or self.filler_vocab < 1:
            raise InvalidConfigError('samples_per_class, tokens_per_class and filler_vocab must be >= 1')
        if self.h < 1 or self.w < 1 or self.d_in < 1:
            raise InvalidConfigError('patch grid and d_in must be >= 1')
        if not 0 <= self.fillers_per_caption < self.caption_len:
            raise InvalidConfigError('a caption needs at least one class token besides its fillers')
        if self.max_attempts < 1:
            raise InvalidConfigError('max_attempts must be >= 1')

    @property
    def vocab_size(self):
        return self.filler_vocab + self.num_classes * self.tokens_per_class

    @property
    def num_patches(self):
        return self.h * self.w

    def class_block(self, c):
        self.check_class(c)
        start = self.filler_vocab + c * self.tokens_per_class
        return np.arange(start, start + self.tokens_per_class)

    def class_token(self, c):
        return int(self.class_block(c)[0])

    def check_class(self, c):
        if not (isinstance(c, (int, np.integer)) and 0 <= c < self.num_classes):
            raise InvalidConfigError('class id %r outside [0, %d)' % (c, self.num_classes))


@dataclass
class Dataset:
    """
    Rows of (image patches, caption tokens). images is (R, h*w, d_in),
    captions is (R, caption_len); poison holds the record written by inject.
    """
    world: WorldSpec
    images: np.ndarray
    captions: np.ndarray
    class_ids: np.ndarray
    sample_ids: np.ndarray
    prototypes: np.ndarray
    poison_flags: Optional[np.ndarray] = None
    poison: Optional[dict] = None

    def __post_init__(self):
        if self.poison_flags is None:
            self.poison_flags = np.zeros(len(self.class_ids), dtype=bool)

    def __len__(self):
        return self.images.shape[0]

    def copy(self):
        return Dataset(world=self.world, images=self.images.copy(), captions=self.captions.copy(),
                       class_ids=self.class_ids.copy(), sample_ids=self.sample_ids.copy(),
                       prototypes=self.prototypes, poison_flags=self.poison_flags.copy(),
                       poison=None if self.poison is None else json.loads(json.dumps(self.poison)))

    @property
    def poison_indices(self):
        if self.poison is None:
            raise MissingInputError('dataset carries no poison index list')
        return np.asarray(self.poison['indices'], dtype=np.int64)


def _flat_cosine(x, y):
    x = x.ravel()
    y = y.ravel()
    return float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))


def draw_prototypes(spec):
    """One (h*w, d_in) unit-row prototype per class, pairwise cosine <= 1 - margin."""
    rng = np.random.default_rng([spec.seed, PROTOTYPE_STREAM])
    limit = 1.0 - spec.margin
    accepted = []
    attempts = 0
    while len(accepted) < spec.num_classes:
        if attempts >= spec.max_attempts:
            raise InvalidConfigError('could not place %d prototypes with margin %g in %d attempts'
                                     % (spec.num_classes, spec.margin, spec.max_attempts))
        attempts += 1
        cand = rng.normal(size=(spec.num_patches, spec.d_in))
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        if all(_flat_cosine(cand, p) <= limit for p in accepted):
            accepted.append(cand)
    logger.debug('prototypes accepted after %d draws', attempts)
    return np.stack(accepted)


def _draw_captions(spec, class_ids, rng):
    num = len(class_ids)
    captions = np.empty((num, spec.caption_len), dtype=np.int64)
    for r, c in enumerate(class_ids):
        tokens = rng.choice(spec.class_block(int(c)), size=spec.caption_len)
        slots = rng.choice(spec.caption_len, size=spec.fillers_per_caption, replace=False)
        tokens[slots] = rng.integers(0, spec.filler_vocab, size=spec.fillers_per_caption)
        captions[r] = tokens
    return captions


def _draw_rows(prototypes, spec, per_class, rng):
    class_ids = np.repeat(np.arange(spec.num_classes), per_class)
    noise = rng.normal(0.0, 1.0, size=(len(class_ids),) + prototypes.shape[1:])
    images = prototypes[class_ids] + spec.noise_sigma * noise
    return images, _draw_captions(spec, class_ids, rng), class_ids


def generate_world(spec):
    prototypes = draw_prototypes(spec)
    rng = np.random.default_rng([spec.seed, TRAIN_STREAM])
    images, captions, class_ids = _draw_rows(prototypes, spec, spec.samples_per_class, rng)
    logger.info('generated %d rows over %d classes', len(class_ids), spec.num_classes)
    return Dataset(world=spec, images=images, captions=captions, class_ids=class_ids,
                   sample_ids=np.arange(len(class_ids)), prototypes=prototypes)


def sample_split(prototypes, spec, per_class, stream):
    """Held-out clean rows from the same prototypes; stream must differ from the training one."""
    if stream in (PROTOTYPE_STREAM, TRAIN_STREAM):
        raise InvalidConfigError('seed stream %d is reserved for world generation' % stream)
    rng = np.random.default_rng([spec.seed, stream])
    images, captions, class_ids = _draw_rows(prototypes, spec, per_class, rng)
    return Dataset(world=spec, images=images, captions=captions, class_ids=class_ids,
                   sample_ids=np.arange(len(class_ids)), prototypes=prototypes)


def nearest_prototype_accuracy(dataset):
    flat = dataset.images.reshape(len(dataset), -1)
    protos = dataset.prototypes.reshape(dataset.prototypes.shape[0], -1)
    dist = np.sum((flat[:, None, :] - protos[None, :, :]) ** 2, axis=2)
    return float(np.mean(np.argmin(dist, axis=1) == dataset.class_ids))


# tensor files

def write_tensor(path, x):
    """float64 values are quantized to little-endian float32 here."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim > MAX_RANK:
        raise TensorFormatError('rank %d exceeds the supported %d' % (x.ndim, MAX_RANK))
    if not np.all(np.isfinite(x)):
        raise NumericalError('refusing to write non-finite tensor to %s' % path)
    header = MAGIC + struct.pack('<I', x.ndim) + struct.pack('<%dI' % x.ndim, *x.shape)
    with open(path, 'wb') as f:
        f.write(header)
        f.write(np.ascontiguousarray(x, dtype='<f4').tobytes())


def read_tensor(path):
    if not os.path.exists(path):
        raise MissingInputError('tensor file %s not found' % path)
    with open(path, 'rb') as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFormatError('%s: bad magic' % path)
    rank, = struct.unpack_from('<I', blob, 4)
    if rank > MAX_RANK:
        raise TensorFormatError('%s: rank %d exceeds %d' % (path, rank, MAX_RANK))
    offset = 8 + 4 * rank
    if len(blob) < offset:
        raise TensorFormatError('%s: truncated header' % path)
    shape = struct.unpack_from('<%dI' % rank, blob, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != offset + 4 * count:
        raise TensorFormatError('%s: expected %d payload bytes, found %d' % (path, 4 * count, len(blob) - offset))
    data = np.frombuffer(blob, dtype='<f4', count=count, offset=offset)
    return data.astype(np.float64).reshape(shape)


# datasets

def save_dataset(dataset, directory, stamp=None):
    """stamp: extra keys (e.g. config and world hashes) for manifest.json and poison.json."""
    stamp = stamp or {}
    if not os.path.exists(directory):
        os.makedirs(directory)
    write_tensor(os.path.join(directory, IMAGES_FILE), dataset.images)
    write_tensor(os.path.join(directory, PROTOTYPES_FILE), dataset.prototypes)
    per_image = dataset.images.shape[1] * dataset.images.shape[2]
    rows = []
    for r in range(len(dataset)):
        rows.append({'sample_id': int(dataset.sample_ids[r]), 'class_id': int(dataset.class_ids[r]),
                     'offset': r * per_image, 'tokens': [int(t) for t in dataset.captions[r]],
                     'poisoned': bool(dataset.poison_flags[r])})
    manifest = {'version': MANIFEST_VERSION, 'world': asdict(dataset.world), 'row_count': len(dataset),
                'images': IMAGES_FILE, 'prototypes': PROTOTYPES_FILE, 'rows': rows}
    manifest.update(stamp)
    write_json(os.path.join(directory, MANIFEST_FILE), manifest)
    if dataset.poison is not None:
        write_json(os.path.join(directory, POISON_FILE), dict(dataset.poison, **stamp))
    logger.info('wrote %d rows to %s', len(dataset), directory)


def load_dataset(directory):
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise MissingInputError('no dataset manifest at %s' % manifest_path)
    manifest = read_json(manifest_path)
    if manifest.get('version') != MANIFEST_VERSION:
        raise TensorFormatError('unsupported manifest version %r' % (manifest.get('version'),))
    world = WorldSpec(**manifest['world'])
    images = read_tensor(os.path.join(directory, manifest['images']))
    prototypes = read_tensor(os.path.join(directory, manifest['prototypes']))
    rows = manifest['rows']
    if len(rows) != manifest['row_count'] or images.shape[0] != len(rows):
        raise TensorFormatError('%s: row count does not match the image file' % directory)
    sample_ids = np.array([r['sample_id'] for r in rows], dtype=np.int64)
    if len(np.unique(sample_ids)) != len(sample_ids):
        raise TensorFormatError('%s: duplicate sample ids' % directory)
    poison_path = os.path.join(directory, POISON_FILE)
    poison = read_json(poison_path) if os.path.exists(poison_path) else None
    return Dataset(world=world, images=images,
                   captions=np.array([r['tokens'] for r in rows], dtype=np.int64),
                   class_ids=np.array([r['class_id'] for r in rows], dtype=np.int64),
                   sample_ids=sample_ids, prototypes=prototypes,
                   poison_flags=np.array([r['poisoned'] for r in rows], dtype=bool),
                   poison=poison)


# model state

def save_model_state(model, directory):
    if not os.path.exists(directory):
        os.makedirs(directory)
    params = {}
    for name, value in model.params().items():
        filename = '%s.otf' % name
        write_tensor(os.path.join(directory, filename), value)
        params[name] = {'file': filename, 'shape': list(value.shape)}
    write_json(os.path.join(directory, MODEL_FILE),
               {'version': MANIFEST_VERSION, 'params': params, 'tau': model.tau,
                'rng_seed': model.rng_seed, 'step': model.step})


def load_model_state(directory):
    path = os.path.join(directory, MODEL_FILE)
    if not os.path.exists(path):
        raise MissingInputError('no model descriptor at %s' % path)
    desc = read_json(path)
    values = {}
    for name in PARAM_NAMES:
        entry = desc['params'][name]
        values[name] = read_tensor(os.path.join(directory, entry['file']))
        if list(values[name].shape) != entry['shape']:
            raise TensorFormatError('%s: parameter %s has shape %s, descriptor says %s'
                                    % (directory, name, values[name].shape, entry['shape']))
    return ModelState(tau=desc['tau'], rng_seed=desc['rng_seed'], step=desc['step'], **values)


# plain text artifacts

def write_json(path, obj):
    with open(path, 'w') as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write('\n')


def read_json(path):
    if not os.path.exists(path):
        raise MissingInputError('%s not found' % path)
    with open(path) as f:
        return json.load(f)


def append_jsonl(path, record):
    with open(path, 'a') as f:
        f.write(json.dumps(record, sort_keys=True))
        f.write('\n')


def read_jsonl(path):
    if not os.path.exists(path):
        raise MissingInputError('%s not found' % path)
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(path, header, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
