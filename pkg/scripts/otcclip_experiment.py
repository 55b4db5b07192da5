#!/usr/bin/env python

"""
Poisoning-defense experiments on the synthetic image/caption world.

    otcclip_experiment.py gen-data --config configs/desk.json --out runs/a
    otcclip_experiment.py pipeline --config configs/desk.json --defense none --attack tdpa --out runs/b
    otcclip_experiment.py report --config configs/desk.json --runs runs/* --out runs/table

Each subcommand reads and writes under --out; timings go to metadata.json only.
"""
import argparse
import glob
import json
import logging
import os
import sys
import time

import numpy as np
import scipy

from src.config import config_hash, config_to_dict, load_config, world_hash
from src.data_io import (
    append_jsonl,
    generate_world,
    load_dataset,
    load_model_state,
    read_json,
    save_dataset,
    save_model_state,
    write_csv,
    write_json,
)
from src.errors import InvalidConfigError, MissingInputError, OTCClipError
from src.evaluation import REPORT_KEYS, audit_pool, evaluate_model, match_audit, report_table
from src.matching import DEFENSE_MODES
from src.poison import POISON_KINDS, poison_dataset
from src.training import ABLATIONS, Trainer

logger = logging.getLogger('otcclip_experiment')

DATA_DIR = 'data'
POISONED_DIR = 'poisoned'
TRAIN_DIR = 'train'
EVAL_DIR = 'eval'
AUDIT_DIR = 'audit'


def _path(cfg, *parts):
    return os.path.join(cfg.output_dir, *parts)


def _fresh(path):
    if os.path.exists(path):
        os.remove(path)
    return path


def _stamp(cfg, record):
    record['config_hash'] = config_hash(cfg)
    record['world_hash'] = world_hash(cfg)
    return record


def _metadata(cfg, command, started):
    if not os.path.exists(cfg.output_dir):
        os.makedirs(cfg.output_dir)
    path = _path(cfg, 'metadata.json')
    meta = read_json(path) if os.path.exists(path) else {}
    meta[command] = {'seconds': time.time() - started, 'finished': time.strftime('%Y-%m-%dT%H:%M:%S'),
                     'numpy': np.__version__, 'scipy': scipy.__version__}
    write_json(path, meta)


def _training_input(cfg):
    if os.path.exists(_path(cfg, POISONED_DIR)):
        return load_dataset(_path(cfg, POISONED_DIR))
    return load_dataset(_path(cfg, DATA_DIR))


def cmd_gen_data(cfg):
    dataset = generate_world(cfg.world)
    save_dataset(dataset, _path(cfg, DATA_DIR), stamp=_stamp(cfg, {}))
    print(len(dataset))
    return 0


def cmd_poison(cfg):
    if cfg.poison is None:
        raise InvalidConfigError('the config has no poison section (or pass --attack)')
    dataset = load_dataset(_path(cfg, DATA_DIR))
    poisoned = poison_dataset(dataset, cfg.poison, cfg.train.sinkhorn, d=cfg.train.d, d_e=cfg.train.d_e,
                              tau=cfg.train.tau)
    save_dataset(poisoned, _path(cfg, POISONED_DIR), stamp=_stamp(cfg, {}))
    print(poisoned.poison['count'])
    return 0


def cmd_train(cfg):
    dataset = _training_input(cfg)
    out = _path(cfg, TRAIN_DIR)
    if not os.path.exists(out):
        os.makedirs(out)
    steps_path = _fresh(os.path.join(out, 'steps.jsonl'))
    trainer = Trainer(dataset, cfg.train, out_dir=out, step_log=lambda rec: append_jsonl(steps_path, rec))
    if cfg.train.resume_from:
        trainer.resume(cfg.train.resume_from)
    else:
        trainer.init()
    model, log = trainer.run()
    save_model_state(model, os.path.join(out, 'model'))
    log_path = _fresh(os.path.join(out, 'train_log.jsonl'))
    for record in log.as_records():
        append_jsonl(log_path, _stamp(cfg, record))
    write_json(os.path.join(out, 'config.json'), _stamp(cfg, {'config': config_to_dict(cfg)}))
    return 0


def cmd_eval(cfg):
    dataset = _training_input(cfg)
    model = load_model_state(_path(cfg, TRAIN_DIR, 'model'))
    report = evaluate_model(model, dataset, cfg.eval, cfg.train.sinkhorn, cfg.train.defense_mode,
                            threads=cfg.train.threads)
    record = _stamp(cfg, report.as_record())
    record['defense_mode'] = cfg.train.defense_mode
    record['seed'] = cfg.seed
    record['ablation'] = cfg.train.ablation_label
    record['pool_size'] = cfg.train.pool_size
    out = _path(cfg, EVAL_DIR)
    if not os.path.exists(out):
        os.makedirs(out)
    write_json(os.path.join(out, 'eval_report.json'), record)
    print(json.dumps({'asr': report.asr, 'zero_shot_acc': report.zero_shot_acc,
                      'linear_probe_acc': report.linear_probe_acc}, sort_keys=True))
    return 0


def cmd_match_audit(cfg):
    dataset = load_dataset(_path(cfg, POISONED_DIR))
    model = load_model_state(_path(cfg, TRAIN_DIR, 'model'))
    defense = cfg.train.defense_mode if cfg.train.defense_mode != 'none' else 'otcclip'
    pool = audit_pool(model, dataset, cfg.eval.audit_pool_size, cfg.seed)
    audit = match_audit(model, dataset, pool, cfg.train.sinkhorn, defense,
                        include_entropy=cfg.train.include_entropy, threads=cfg.train.threads)
    out = _path(cfg, AUDIT_DIR)
    if not os.path.exists(out):
        os.makedirs(out)
    path = _fresh(os.path.join(out, 'audit.jsonl'))
    for row, scores in zip(audit.rows, audit.scores):
        append_jsonl(path, dict(row, scores=[float(s) for s in scores]))
    write_json(os.path.join(out, 'audit_summary.json'),
               _stamp(cfg, {'defended_fraction': audit.defended_fraction, 'poisoned': len(audit.rows),
                            'defense_mode': defense}))
    print(audit.defended_fraction)
    return 0


def cmd_report(cfg, runs, by='defense'):
    paths = []
    for pattern in runs:
        paths.extend(sorted(glob.glob(os.path.join(pattern, EVAL_DIR, 'eval_report.json'))))
    if not paths:
        raise MissingInputError('no eval_report.json found under %s' % ', '.join(runs))
    reports = [read_json(p) for p in paths]
    header, rows = report_table(reports, by=by)
    if not os.path.exists(cfg.output_dir):
        os.makedirs(cfg.output_dir)
    write_csv(_path(cfg, 'report.csv'), header, rows)
    runs_used = [{'path': p, 'config_hash': r.get('config_hash')} for p, r in zip(paths, reports)]
    write_json(_path(cfg, 'report.json'),
               _stamp(cfg, {'by': by, 'header': header, 'rows': rows, 'runs': runs_used}))
    logger.info('aggregated %d runs into %s', len(reports), _path(cfg, 'report.csv'))
    return 0


def cmd_pipeline(cfg):
    for step in (cmd_gen_data, cmd_poison, cmd_train, cmd_eval):
        if step is cmd_poison and cfg.poison is None:
            continue
        step(cfg)
    return 0


COMMANDS = {
    'gen-data': cmd_gen_data,
    'poison': cmd_poison,
    'train': cmd_train,
    'eval': cmd_eval,
    'match-audit': cmd_match_audit,
    'pipeline': cmd_pipeline,
}


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Options Below ....")
    parser.add_argument('command', choices=sorted(list(COMMANDS) + ['report']))
    parser.add_argument('--config', required=True, help='experiment config (JSON)')
    parser.add_argument('--seed', type=int, default=None, help='override the experiment seed')
    parser.add_argument('--defense', choices=DEFENSE_MODES, default=None)
    parser.add_argument('--attack', choices=POISON_KINDS, default=None)
    parser.add_argument('--out', default=None, help='output directory')
    parser.add_argument('--threads', type=int, default=None, help='worker threads for matching')
    parser.add_argument('--ablation', choices=ABLATIONS, default=None, help='train one ablation variant')
    parser.add_argument('--pool-size', type=int, default=None, help='override the caption pool size')
    parser.add_argument('--by', choices=sorted(REPORT_KEYS), default='defense', help='report rows')
    parser.add_argument('--runs', nargs='*', default=[], help='run directories for report')
    parser.add_argument('--verbose', '-v', action='count', default=0)
    return parser.parse_args(argv)


def _error_record(e, exit_code):
    sys.stderr.write(json.dumps({'error': type(e).__name__, 'message': str(e),
                                 'exit_code': exit_code}, sort_keys=True) + '\n')
    return exit_code


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        cfg = load_config(args.config, seed=args.seed, defense=args.defense, attack=args.attack,
                          out=args.out, threads=args.threads, ablation=args.ablation,
                          pool_size=args.pool_size)
        started = time.time()
        if args.command == 'report':
            code = cmd_report(cfg, args.runs, args.by)
        else:
            code = COMMANDS[args.command](cfg)
        _metadata(cfg, args.command, started)
        return code
    except OTCClipError as e:
        return _error_record(e, e.exit_code)
    except OSError as e:
        # unreadable or unwritable paths
        return _error_record(e, MissingInputError.exit_code)
    except (ValueError, TypeError) as e:
        return _error_record(e, InvalidConfigError.exit_code)


if __name__ == '__main__':
    sys.exit(main())
