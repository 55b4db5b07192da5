import json
import os

import pytest

from otcclip_experiment import main
from src.data_io import load_dataset, read_json, read_jsonl

SMALL = {
    'world': {'num_classes': 3, 'samples_per_class': 8, 'tokens_per_class': 2, 'filler_vocab': 6,
              'h': 2, 'w': 2, 'd_in': 6, 'caption_len': 4, 'fillers_per_caption': 1, 'seed': 3},
    'poison': {'kind': 'tdpa', 'adv_class': 0, 'rate': 0.25, 'template_count': 3},
    'train': {'epochs': 2, 'batch_size': 8, 'lr': 0.01, 'pool_size': 16, 'd': 4, 'd_e': 4,
              'sinkhorn': {'lam': 0.1, 'max_iters': 50, 'tol': 1e-6}},
    'eval': {'heldout_per_class': 4, 'probe_per_class': 6, 'probe_steps': 20, 'audit_pool_size': 10},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / 'small.json'
    path.write_text(json.dumps(SMALL))
    return str(path)


def test_gen_data_on_default_world(tmp_path, capsys):
    path = tmp_path / 'default.json'
    path.write_text('{}')
    out = str(tmp_path / 'run')
    assert main(['gen-data', '--config', str(path), '--out', out]) == 0
    assert capsys.readouterr().out.strip() == '2000'
    assert len(load_dataset(os.path.join(out, 'data'))) == 2000
    assert 'gen-data' in read_json(os.path.join(out, 'metadata.json'))


def test_missing_input_exits_with_code_three(small_config, tmp_path, capsys):
    assert main(['train', '--config', small_config, '--out', str(tmp_path / 'empty')]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err['error'] == 'MissingInputError' and err['exit_code'] == 3


def test_bad_config_exits_with_code_two(tmp_path, capsys):
    path = tmp_path / 'bad.json'
    path.write_text('{"train": {"epochs": 0}}')
    assert main(['gen-data', '--config', str(path), '--out', str(tmp_path / 'x')]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['exit_code'] == 2


def test_pipeline_is_deterministic_across_threads(small_config, tmp_path):
    outputs = []
    for threads in (1, 3):
        out = str(tmp_path / ('t%d' % threads))
        assert main(['pipeline', '--config', small_config, '--out', out, '--threads', str(threads)]) == 0
        with open(os.path.join(out, 'eval', 'eval_report.json'), 'rb') as f:
            outputs.append(f.read())
        records = read_jsonl(os.path.join(out, 'train', 'train_log.jsonl'))
        assert [r['epoch'] for r in records] == [1, 2]
    assert outputs[0] == outputs[1]


def test_match_audit_and_report(small_config, tmp_path):
    runs = []
    for defense in ('none', 'otcclip'):
        out = str(tmp_path / defense)
        assert main(['pipeline', '--config', small_config, '--out', out, '--defense', defense]) == 0
        runs.append(out)
    assert main(['match-audit', '--config', small_config, '--out', runs[1]]) == 0
    summary = read_json(os.path.join(runs[1], 'audit', 'audit_summary.json'))
    assert summary['poisoned'] == 6
    assert len(read_jsonl(os.path.join(runs[1], 'audit', 'audit.jsonl'))) == 6

    table = str(tmp_path / 'table')
    assert main(['report', '--config', small_config, '--out', table, '--runs'] + runs) == 0
    with open(os.path.join(table, 'report.csv')) as f:
        lines = f.read().splitlines()
    assert lines[0] == 'defense,tdpa,config_hashes'
    assert [line.split(',')[0] for line in lines[1:]] == ['none', 'otcclip']


def test_training_plot(small_config, tmp_path):
    from utils.plot_training_log import load_records, plot_run

    out = str(tmp_path / 'run')
    assert main(['pipeline', '--config', small_config, '--out', out]) == 0
    assert [r['epoch'] for r in load_records(out)] == [1, 2]
    plot_run(out, str(tmp_path / 'losses.png'))
    assert os.path.getsize(str(tmp_path / 'losses.png')) > 0


def test_non_numeric_config_value_exits_with_code_two(tmp_path, capsys):
    path = tmp_path / 'bad.json'
    path.write_text('{"train": {"sinkhorn": {"max_iters": "abc"}}}')
    assert main(['gen-data', '--config', str(path), '--out', str(tmp_path / 'x')]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err['error'] == 'InvalidConfigError' and 'train.sinkhorn' in err['message']


def test_unwritable_output_gives_an_error_record(small_config, tmp_path, capsys):
    blocker = tmp_path / 'file'
    blocker.write_text('not a directory')
    code = main(['gen-data', '--config', small_config, '--out', str(blocker / 'run')])
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == err['exit_code'] == 3
    assert err['error'] in ('NotADirectoryError', 'FileExistsError')


def test_artifacts_carry_the_config_hash(small_config, tmp_path):
    from src.config import config_hash, load_config

    out = str(tmp_path / 'run')
    assert main(['pipeline', '--config', small_config, '--out', out]) == 0
    expected = config_hash(load_config(small_config, out=out))
    for parts in (('data', 'manifest.json'), ('poisoned', 'manifest.json'), ('poisoned', 'poison.json'),
                  ('eval', 'eval_report.json'), ('train', 'config.json')):
        assert read_json(os.path.join(out, *parts))['config_hash'] == expected

    table = str(tmp_path / 'table')
    assert main(['report', '--config', small_config, '--out', table, '--runs', out]) == 0
    with open(os.path.join(table, 'report.csv')) as f:
        lines = f.read().splitlines()
    assert lines[1].split(',')[-1] == expected[:12]
    summary = read_json(os.path.join(table, 'report.json'))
    assert summary['runs'][0]['config_hash'] == expected
    assert 'config_hash' in summary and 'world_hash' in summary


def test_ablation_and_pool_size_reports(small_config, tmp_path):
    runs = []
    for ablation in ('full', 'no_im', 'no_ot_match'):
        out = str(tmp_path / ablation)
        assert main(['pipeline', '--config', small_config, '--out', out, '--ablation', ablation]) == 0
        runs.append(out)
    assert read_json(os.path.join(runs[2], 'eval', 'eval_report.json'))['defense_mode'] == 'global_baseline'
    out = str(tmp_path / 'pool')
    assert main(['pipeline', '--config', small_config, '--out', out, '--pool-size', '8']) == 0
    assert read_json(os.path.join(out, 'eval', 'eval_report.json'))['pool_size'] == 8

    table = str(tmp_path / 'ablation')
    assert main(['report', '--config', small_config, '--out', table, '--by', 'ablation', '--runs'] + runs) == 0
    with open(os.path.join(table, 'report.csv')) as f:
        lines = f.read().splitlines()
    assert lines[0] == 'ablation,tdpa,zero_shot,config_hashes'
    assert [line.split(',')[0] for line in lines[1:]] == ['full', 'no_ot_match', 'no_im']

    table = str(tmp_path / 'sizes')
    assert main(['report', '--config', small_config, '--out', table, '--by', 'pool_size',
                 '--runs', runs[0], out]) == 0
    with open(os.path.join(table, 'report.csv')) as f:
        assert [line.split(',')[0] for line in f.read().splitlines()[1:]] == ['8', '16']


def test_pool_smaller_than_batch_is_rejected(small_config, tmp_path):
    assert main(['train', '--config', small_config, '--out', str(tmp_path / 'x'), '--pool-size', '4']) == 2
