"""
Experiment configuration: one JSON file with sections world, poison, train and
eval, plus output_dir and seed. Unknown keys are rejected with their dotted
path; every section validates itself on construction.

The top-level seed drives the poison and train seeds. The world keeps its own
seed so runs over several seeds share one world.
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Optional

from src.data_io import WorldSpec
from src.errors import InvalidConfigError, MissingInputError
from src.evaluation import EvalConfig
from src.losses import LossWeights
from src.ot_core import SinkhornConfig
from src.poison import PGDSettings, PoisonSpec, TriggerSpec
from src.training import TrainConfig, apply_ablation

logger = logging.getLogger(__name__)

# keys that do not change results and stay out of the config hash
UNHASHED = ('output_dir', 'threads', 'resume_from')


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    poison: Optional[PoisonSpec] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = 'runs/default'
    seed: int = 0


NESTED = {
    ExperimentConfig: {'world': WorldSpec, 'poison': PoisonSpec, 'train': TrainConfig, 'eval': EvalConfig},
    PoisonSpec: {'trigger': TriggerSpec},
    TriggerSpec: {'pgd': PGDSettings},
    TrainConfig: {'weights': LossWeights, 'sinkhorn': SinkhornConfig},
}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise InvalidConfigError('%s must be an object, got %s' % (path or 'config', type(data).__name__))
    known = set(f.name for f in fields(cls))
    for key in sorted(data):
        if key not in known:
            raise InvalidConfigError('unknown config key %s' % '.'.join(filter(None, [path, key])))
    kwargs = {}
    for key, value in data.items():
        sub = NESTED.get(cls, {}).get(key)
        if sub is not None and value is not None:
            value = _build(sub, value, '.'.join(filter(None, [path, key])))
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise InvalidConfigError('%s: %s' % (path or 'config', e))


def config_from_dict(data):
    return apply_seed(_build(ExperimentConfig, data, ''))


def apply_seed(cfg):
    train = replace(cfg.train, seed=cfg.seed)
    poison = None if cfg.poison is None else replace(cfg.poison, seed=cfg.seed)
    return replace(cfg, train=train, poison=poison)


def apply_overrides(cfg, seed=None, defense=None, attack=None, out=None, threads=None, ablation=None,
                    pool_size=None):
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if defense is not None:
        cfg = replace(cfg, train=replace(cfg.train, defense_mode=defense))
    if attack is not None:
        poison = PoisonSpec(kind=attack) if cfg.poison is None else cfg.poison
        cfg = replace(cfg, poison=replace(poison, kind=attack, adaptive=poison.adaptive and attack == poison.kind))
    if out is not None:
        cfg = replace(cfg, output_dir=out)
    if threads is not None:
        cfg = replace(cfg, train=replace(cfg.train, threads=int(threads)))
    if ablation is not None:
        cfg = replace(cfg, train=apply_ablation(cfg.train, ablation))
    if pool_size is not None:
        cfg = replace(cfg, train=replace(cfg.train, pool_size=int(pool_size)))
    return apply_seed(cfg)


def load_config(path, **overrides):
    if not os.path.exists(path):
        raise MissingInputError('config file %s not found' % path)
    with open(path) as f:
        try:
            data = json.load(f)
        except ValueError as e:
            raise InvalidConfigError('%s is not valid JSON: %s' % (path, e))
    cfg = apply_overrides(config_from_dict(data), **overrides)
    logger.debug('loaded config %s (hash %s)', path, config_hash(cfg)[:12])
    return cfg


def config_to_dict(cfg):
    return asdict(cfg)


def _strip(obj):
    if isinstance(obj, dict):
        return dict((k, _strip(v)) for k, v in obj.items() if k not in UNHASHED)
    return obj


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode('utf-8')).hexdigest()


def config_hash(cfg):
    return _digest(_strip(config_to_dict(cfg)))


def world_hash(cfg_or_world):
    world = cfg_or_world.world if isinstance(cfg_or_world, ExperimentConfig) else cfg_or_world
    if not is_dataclass(world):
        raise InvalidConfigError('world_hash needs a WorldSpec')
    return _digest(asdict(world))
