import argparse
import json
import os, os.path
import dill
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt


def load_records(run_dir):
    """Per-epoch records from train_log.jsonl, or from the newest trainer snapshot."""
    log_path = os.path.join(run_dir, 'train', 'train_log.jsonl')
    if os.path.exists(log_path):
        with open(log_path) as f:
            return [json.loads(line) for line in f if line.strip()]

    ckpt_dir = os.path.join(run_dir, 'train', 'checkpoints')
    snapshots = sorted(f for f in os.listdir(ckpt_dir) if f.endswith('.dill'))
    filename = os.path.join(ckpt_dir, snapshots[-1])
    print('loading snapshot %s ...' % filename)
    with open(filename, 'rb') as f:
        snapshot = dill.loads(f.read())
    return snapshot['log'].as_records()


def plot_run(run_dir, out_path):
    records = load_records(run_dir)
    epochs = [r['epoch'] for r in records]

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 8), sharex=True)
    ax1.grid(True)
    for key in ('total', 'clip', 'inter', 'intra'):
        ax1.plot(epochs, [r[key] for r in records], label=key)
    for r in records:
        if r['matching']:
            ax1.axvline(r['epoch'], color='grey', alpha=0.2)
    ax1.set_ylabel('mean loss')
    ax1.legend()

    ax2.grid(True)
    audit = [(r['epoch'], r['audit_defended']) for r in records if r.get('audit_defended') is not None]
    if audit:
        ax2.plot([a[0] for a in audit], [a[1] for a in audit], 'o-')
    ax2.set_ylim(-0.05, 1.05)
    ax2.set_xlabel('epoch')
    ax2.set_ylabel('poisoned rows re-matched away')
    ax1.set_title(os.path.basename(os.path.normpath(run_dir)))

    fig.savefig(out_path)
    print('%s created' % out_path)


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description="Plot the training log of a run directory")
    parser.add_argument('run_dir')
    parser.add_argument('--out', default='training_log.png')
    args = parser.parse_args()
    plot_run(args.run_dir, args.out)
