"""
Adversarial training with and without the similarity consistency term
=====================================================================

A reduced version of the lambda comparison in ``lfrclab.experiment``: four
epochs and one seed, so it finishes in a few minutes.  Pass ``--full``
to run the three-seed, ten-epoch comparison.
"""

import sys
from dataclasses import replace

from lfrclab.experiment import ComparisonSetup, run_comparison

setup = ComparisonSetup()
seeds = (0, 1, 2)
if "--full" not in sys.argv:
    setup = replace(setup, epochs=4)
    seeds = (0,)


def show(run):
    print(f"seed={run.seed} lambda={run.lam:g}  mean DS={run.mean_ds:.5f}  "
          f"clean={run.clean_acc:.3f}  pgd20={run.robust_acc:.3f}  ({run.seconds:.0f}s)")


runs = run_comparison(setup, seeds=seeds, progress=show)

# per-epoch history of the regularised run
for rec in runs[-1].history:
    print(rec)
