"""
Similarity difference versus accuracy drop, batch by batch
==========================================================

Train a small model, then for each test batch measure how far the
adversarial similarity matrix moves from the natural one (DS) and how many
predictions the attack flips (DA).
"""

import numpy as np

from lfrclab.analysis import batch_similarity, ds_da_scatter, grouping_order, scatter_summary, to_gray
from lfrclab.attacks import UNBOUNDED, AttackConfig
from lfrclab.data import synthetic_gaussians
from lfrclab.models import init_model, mlp_spec
from lfrclab.trainer import TrainConfig, train

train_set = synthetic_gaussians(3, 150, 4, 3.0, seed=0)
val_set = synthetic_gaussians(3, 50, 4, 3.0, seed=1)
test_set = synthetic_gaussians(3, 200, 4, 3.0, seed=2)

attack = AttackConfig(0.5, 0.125, 10, True, data_range=UNBOUNDED)
config = TrainConfig(mlp_spec([4, 32, 3]), attack, epochs=10, batch_size=32, lr=0.05, lam=0.0)
model = init_model(config.model, 0)
train(config, train_set, val_set, model=model)

diags = ds_da_scatter(model, test_set, AttackConfig(0.5, 0.125, 20, True, data_range=UNBOUNDED), 40)
for d in diags:
    print(f"batch {d.batch_index:2d}  DS={d.ds:.4f}  DA={d.da}")
print(scatter_summary(diags))

# the natural similarity matrix of the first batch, rows grouped by class
x, y = test_set.inputs[:12], test_set.labels[:12]
m_nat = batch_similarity(model, x, y, model.spec.tap_points[-1])
order = grouping_order(y)
print(y[order])
print(to_gray(m_nat.numpy()[np.ix_(order, order)]))
