'''
Plot ROC-AUC against the critical threshold from a roc_sweep.csv written by
`nearmiss validate`, and optionally the ROC curve of the block exceedance
probabilities in a cor_blocks.csv written by `nearmiss risk`.

usage: plot_roc_sweep.py SWEEP_CSV OUTPUT_PNG [--cor COR_BLOCKS_CSV --omega W]
'''

import argparse
import sys

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from nearmiss.RiskEstimator import roc_auc  # noqa: E402
from nearmiss.utils import read_csv  # noqa: E402


def plot(sweep_path: str, output: str, cor_path: str = None, omega: float = -0.5) -> None:
    sweep = read_csv(sweep_path)
    defined = sweep[~sweep['skipped'].astype(bool)]

    with plt.style.context('bmh'):
        panels = 2 if cor_path else 1
        fig, axes = plt.subplots(1, panels, figsize=(6 * panels, 5), squeeze=False)
        ax = axes[0, 0]
        ax.plot(defined['omega'], defined['auc'], marker='o', color='k')
        ax.axhline(0.5, ls='--', lw=1, color='grey')
        ax.set_xlabel(r'critical threshold $\omega$ (s)')
        ax.set_ylabel('AUC')
        ax.set_ylim(0, 1.02)

        if cor_path:
            blocks = read_csv(cor_path)
            # cases: observed minimum 2D-TTC at or below |omega|
            labels = (-blocks['z'] <= abs(omega)).astype(int).to_numpy()
            roc = roc_auc(blocks['p_crash'].to_numpy(dtype=float), labels)
            ax = axes[0, 1]
            ax.plot(roc.fpr, roc.tpr, color='k', drawstyle='steps-post')
            ax.plot([0, 1], [0, 1], ls='--', lw=1, color='grey')
            ax.set_title(f"$\\omega$ = {omega:g} s, AUC = {roc.auc:.3f}")
            ax.set_xlabel('false positive rate')
            ax.set_ylabel('true positive rate')

        fig.tight_layout()
        fig.savefig(output, dpi=150)
        plt.close(fig)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description='Plot a nearmiss ROC threshold sweep.')
    parser.add_argument('sweep', help='roc_sweep.csv from `nearmiss validate`')
    parser.add_argument('output', help='output image path')
    parser.add_argument('--cor', help='cor_blocks.csv from `nearmiss risk`, adds the ROC curve panel')
    parser.add_argument('--omega', type=float, default=-0.5,
                        help='the threshold `nearmiss risk` ran with')
    args = parser.parse_args(argv)
    plot(args.sweep, args.output, args.cor, args.omega)
    return 0


if __name__ == '__main__':
    sys.exit(main())
