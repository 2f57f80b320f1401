"""
Transfer versus training from scratch
=====================================

Fine-tunes a pretrained and a randomly initialised encoder on the
synthetic lesion task with all labels and with 10% of them, then trains
a small probe on frozen embeddings.  One seed; a few minutes on one core.
"""

import numpy as np

from voxmae import desk
from voxmae import finetune as F
from voxmae import metrics as MT
from voxmae import model as M
from voxmae import pretrain as P

task = desk.lesion_task()
train, val, test = task.part("train"), task.part("val"), task.part("test")
print("train/val/test sizes", len(train[0]), len(val[0]), len(test[0]))

state = P.run_pretraining(desk.pretrain_config(), desk.pretrain_corpus()[0])
encoder = M.encoder_params(state.params)

for fraction in (1.0, 0.1):
    for name, enc in (("pretrained", encoder), ("scratch", None)):
        rec = F.run_finetune(desk.finetune_config(0, fraction), train, val, test, encoder=enc)
        auc = MT.mean_auroc(rec.best.predict(test[0]), test[1])
        curve = " ".join(f"{a:.2f}" for a in rec.test_auroc[::5])
        print(f"{fraction:4.0%} {name:10s} best epoch {rec.best_epoch:2d}  test AUROC {auc:.3f}  curve {curve}")

# frozen embeddings: class token and mean patch token, no encoder updates
cfg = desk.model_config()
f_train, f_test = F.extract_features(encoder, cfg, train[0]), F.extract_features(encoder, cfg, test[0])
probe = F.train_frozen_probe(f_train, train[1], seed=0)
print(f"frozen probe test AUROC {MT.mean_auroc(probe.predict(f_test), test[1]):.3f}")
