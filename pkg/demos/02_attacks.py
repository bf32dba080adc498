"""
FGSM, PGD and the CW margin attack on a toy classifier
=======================================================
"""

import numpy as np

from lfrclab.analysis import accuracy, robust_accuracy
from lfrclab.attacks import UNBOUNDED, AttackConfig
from lfrclab.data import synthetic_gaussians
from lfrclab.models import init_model, mlp_spec
from lfrclab.trainer import TrainConfig, train

train_set = synthetic_gaussians(2, 200, 2, 4.0, seed=0)
val_set = synthetic_gaussians(2, 100, 2, 4.0, seed=1)

# a clean-trained MLP: a single PGD step with eps=0 leaves the input untouched
clean = AttackConfig(0.0, 1.0, 1, False, data_range=UNBOUNDED)
config = TrainConfig(mlp_spec([2, 16, 2]), clean, epochs=20, batch_size=32, lr=0.05, lfrc_enabled=False)
model = init_model(config.model, 0)
train(config, train_set, val_set, model=model)
print("clean accuracy:", accuracy(model, val_set))

for eps in (0.5, 1.0, 2.0):
    fgsm = AttackConfig(eps, eps, 1, False, data_range=UNBOUNDED)
    pgd = AttackConfig(eps, eps / 4, 20, True, data_range=UNBOUNDED)
    cw = AttackConfig(eps, eps / 4, 20, True, "cw-margin", UNBOUNDED)
    print(f"eps={eps}: fgsm {robust_accuracy(model, val_set, fgsm):.3f}  "
          f"pgd20 {robust_accuracy(model, val_set, pgd):.3f}  cw20 {robust_accuracy(model, val_set, cw):.3f}")
