"""
Where the classifier looks, and how sure it is
==============================================

Grad-CAM maps from a fine-tuned classifier compared with the known
lesion masks, followed by test-time-augmentation entropy.
"""

import sys
from pathlib import Path

import numpy as np

from voxmae import desk
from voxmae import finetune as F
from voxmae import interpret as I
from voxmae import model as M
from voxmae import pretrain as P

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

task = desk.lesion_task()
state = P.run_pretraining(desk.pretrain_config(), desk.pretrain_corpus()[0])
rec = F.run_finetune(desk.finetune_config(0), task.part("train"), task.part("val"),
                     encoder=M.encoder_params(state.params))
clf = rec.best

vols, labels = task.part("test")
masks = task.masks_of("test")
positives = [i for i in range(len(vols)) if labels[i, 0]][:20]
ratios = []
for i in positives:
    sal = I.gradcam(clf, vols[i]).values
    ratios.append(sal[masks[i]].mean() / max(sal[~masks[i]].mean(), 1e-12))
print(f"inside/outside saliency ratio, median over {len(ratios)} positives: {np.median(ratios):.2f}")

# overlay for the first positive through the lesion centre
i = positives[0]
z = int(np.argwhere(masks[i])[:, 2].mean())
I.render_slices(vols[i], "axial", z, I.gradcam(clf, vols[i]), out / "gradcam.ppm")

# entropy of 20 augmented predictions per case (the full protocol uses 50)
report = I.dataset_entropy(clf, vols[:10], n=20)
for cid, h in zip(report.case_ids, report.per_case):
    print(f"case {cid}: label {labels[int(cid), 0]}  entropy {h:.3f}")
print(f"mean entropy {report.mean:.3f} nats (ln 2 = {np.log(2):.3f})")
