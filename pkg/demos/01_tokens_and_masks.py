"""
Volumes, tokens and masks
=========================

A walk through the data side of the model: a synthetic chest-like
volume is cut into cubic patches, a random mask hides three quarters of
them, and the positional table tells the encoder where each patch sat.
"""

import numpy as np

from voxmae import model as M
from voxmae.volumes import SyntheticSpec, generate_synthetic

# one positive volume from the synthetic lesion corpus, 32^3 voxels in [0, 1]
vols, manifest, masks = generate_synthetic(SyntheticSpec(n_volumes=1, prevalence=1.0, seed=7), return_masks=True)
v = vols[0]
print("volume", v.dims, "spacing", v.spacing, "label", manifest.records[0].labels)
print("lesion voxels", int(masks[0].sum()))

# patch size 8 gives a 4x4x4 grid; each token is 512 voxels, x-fastest
seq = M.patchify(v, 8)
print("tokens", seq.tokens.shape, "grid", seq.grid)
assert M.unpatchify(seq).equals(v)  # lossless

# hide 75% of the tokens; the plan stores the shuffle and its inverse
plan = M.random_mask(seq.tokens.shape[0], 0.75, 0)
print("visible", plan.n_visible, "masked", int(plan.masked_flags.sum()))
print("restore undoes shuffle:", np.array_equal(plan.restore[plan.shuffle], np.arange(64)))

# 3-D sin-cos table: one third of the channels per axis
table = M.posembed_3d(seq.grid, 48)
print("posembed", table.shape, "origin row starts", np.round(table[0, :4], 3))
d2 = ((table[:, None] - table[None]) ** 2).sum(-1)
print("nearest distinct positions are", round(float(np.sqrt(d2[d2 > 0].min())), 3), "apart")

# the default configuration, counted from shapes only
n = M.count_parameters(M.ModelConfig(), include_decoder=False)
print(f"default encoder: {n / 1e6:.1f}M parameters")
