"""Grad-CAM saliency, test-time-augmentation entropy and slice rendering."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import entr

from . import autograd as ag
from . import model as M
from .errors import InvalidArgument
from .finetune import Classifier, _tokens, features_tensor, head_forward
from .volumes import PRESETS, AugmentationSpec, Volume, augment, trilinear_resize


@dataclass
class SaliencyVolume:
    values: np.ndarray
    target_class: int

    @property
    def dims(self):
        return self.values.shape


def token_grid(values, grid):
    """Per-token values (x-fastest) -> array indexed [gx, gy, gz]."""
    gx, gy, gz = grid
    return np.asarray(values).reshape(gz, gy, gx).transpose(2, 1, 0)


def gradcam(clf: Classifier, v: Volume, target_class=0) -> SaliencyVolume:
    """Gradient-weighted activation map from the last encoder block.

    Channel weights are the token-averaged gradients of the target logit
    with respect to the last block's patch-token outputs; relevance per
    token is the ReLU of the weighted channel sum.  The token map is
    upsampled trilinearly to the input size and divided by its maximum.
    """
    if not 0 <= target_class < clf.head.class_count:
        raise InvalidArgument(f"class {target_class} outside [0, {clf.head.class_count})")
    cfg = clf.cfg
    tokens = ag.parameter(_tokens(cfg, v))  # makes every activation differentiable
    trace = M.Trace()
    feats = features_tensor(clf.params, cfg, tokens, trace=trace)
    params = {k: ag.Tensor(x) for k, x in clf.params.items()}
    logits, _ = head_forward(params, clf.head, feats, False, clf.buffers)
    ag.sum_(logits[:, target_class]).backward()

    last = trace["blocks"][-1]
    acts = last.data[0, 1:]
    grads = last.grad[0, 1:] if last.grad is not None else np.zeros_like(acts)
    weights = grads.mean(axis=0)
    relevance = np.maximum(acts @ weights, 0.0)
    cam = trilinear_resize(token_grid(relevance, cfg.grid).astype(np.float64), v.dims)
    cam = np.maximum(cam, 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return SaliencyVolume(cam, target_class)


# ---------------------------------------------------------------------------
# uncertainty


def binary_entropy(p):
    """Entropy in nats of Bernoulli(p); 0 at p in {0, 1}, ln 2 at 0.5."""
    p = np.asarray(p, dtype=np.float64)
    return entr(p) + entr(1.0 - p)


def _preset(preset):
    if isinstance(preset, AugmentationSpec):
        return preset
    try:
        return PRESETS[preset]()
    except KeyError:
        raise InvalidArgument(f"unknown augmentation preset {preset!r}") from None


def tta_predictions(clf: Classifier, v: Volume, n=50, preset="aggressive", seed=0):
    """Probabilities (n, classes) under ``n`` seeded augmentations of ``v``."""
    if n < 1:
        raise InvalidArgument("need at least one augmentation draw")
    spec = _preset(preset)
    draws = [augment(v, spec, [seed, i]) for i in range(n)]
    return np.asarray(clf.predict(draws), dtype=np.float64).reshape(n, -1)


def tta_entropy(clf: Classifier, v: Volume, n=50, preset="aggressive", seed=0, mode="mean_of_entropies"):
    """Per-case predictive entropy under test-time augmentation.

    ``mean_of_entropies`` averages the per-draw binary entropies (over
    draws and classes); ``entropy_of_mean`` takes the entropy of the mean
    prediction instead.
    """
    probs = tta_predictions(clf, v, n, preset, seed)
    if mode == "mean_of_entropies":
        return float(binary_entropy(probs).mean())
    if mode == "entropy_of_mean":
        return float(binary_entropy(probs.mean(axis=0)).mean())
    raise InvalidArgument(f"unknown entropy mode {mode!r}")


@dataclass
class EntropyReport:
    case_ids: list
    per_case: list
    mean: float
    n_augmentations: int
    preset: str
    extra: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "mean_entropy"])
            for cid, h in zip(self.case_ids, self.per_case):
                w.writerow([cid, repr(h)])
            w.writerow(["# dataset_mean", repr(self.mean)])


def dataset_entropy(clf: Classifier, volumes, case_ids=None, n=50, seed=0, preset="aggressive",
                    mode="mean_of_entropies") -> EntropyReport:
    volumes = list(volumes)
    if not volumes:
        raise InvalidArgument("empty evaluation split")
    case_ids = list(case_ids) if case_ids is not None else [str(i) for i in range(len(volumes))]
    per_case = [tta_entropy(clf, v, n, preset, [seed, i], mode) for i, v in enumerate(volumes)]
    name = preset if isinstance(preset, str) else "custom"
    return EntropyReport(case_ids, per_case, float(np.mean(per_case)), n, name)


# ---------------------------------------------------------------------------
# rendering

PLANES = ("axial", "coronal", "sagittal")


def slice_image(values, plane, index):
    """2-D slice with rows running along the second in-plane axis."""
    values = np.asarray(values)
    axis = {"axial": 2, "coronal": 1, "sagittal": 0}[plane]
    if not 0 <= index < values.shape[axis]:
        raise InvalidArgument(f"index {index} outside [0, {values.shape[axis]}) for {plane}")
    return np.take(values, index, axis=axis).T


def _quantize(x):
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_slices(v: Volume, plane, index, overlay: SaliencyVolume | None, path) -> None:
    """Write a binary PGM slice, or a PPM with a red overlay scaled by saliency."""
    if plane not in PLANES:
        raise InvalidArgument(f"plane must be one of {PLANES}")
    gray = slice_image(v.voxels, plane, index).astype(np.float64)
    h, w = gray.shape
    if overlay is None:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(_quantize(gray).tobytes())
        return
    if overlay.values.shape != v.dims:
        raise InvalidArgument("overlay dims differ from the volume")
    s = np.clip(slice_image(overlay.values, plane, index), 0.0, 1.0)
    rgb = np.stack([gray + s * (1.0 - gray), gray * (1.0 - s), gray * (1.0 - s)], axis=-1)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(rgb).tobytes())


def read_pnm(path):
    """Minimal reader for the binary P5/P6 files written by :func:`render_slices`."""
    raw = open(path, "rb").read()
    parts = raw.split(b"\n", 3)
    kind = parts[0].decode()
    w, h = (int(x) for x in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8)
    return data.reshape(h, w, 3) if kind == "P6" else data.reshape(h, w)
