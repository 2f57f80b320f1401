"""Grad-CAM, TTA entropy and slice rendering."""

import math

import mpmath
import numpy as np
import pytest

from voxmae import autograd as ag
from voxmae import finetune as F
from voxmae import interpret as I
from voxmae import model as M
from voxmae.errors import InvalidArgument
from voxmae.volumes import AugmentationSpec, SyntheticSpec, Volume, generate_synthetic

CFG = M.tiny_config(input_dims=(16, 16, 16), patch_size=4, embed_dim=24, depth=2, heads=2,
                    decoder_dim=12, decoder_depth=1, decoder_heads=2)


@pytest.fixture(scope="module")
def clf():
    return F.new_classifier(CFG, F.HeadConfig("linear", 2), seed=0)


@pytest.fixture(scope="module")
def vol():
    vols, _ = generate_synthetic(SyntheticSpec(dims=(16, 16, 16), n_volumes=1, lesion_radius_range=(2, 3),
                                               prevalence=1.0, seed=3))
    return vols[0]


def test_binary_entropy_values():
    assert I.binary_entropy(0.5) == pytest.approx(math.log(2), rel=1e-15)
    assert I.binary_entropy(0.0) == 0.0 and I.binary_entropy(1.0) == 0.0
    mpmath.mp.dps = 40
    p = mpmath.mpf("0.2")
    ref = -(p * mpmath.log(p) + (1 - p) * mpmath.log(1 - p))
    assert abs(I.binary_entropy(0.2) - float(ref)) <= 1e-15
    assert I.binary_entropy(0.3) == pytest.approx(I.binary_entropy(0.7), rel=1e-15)


def test_tta_identity_equals_plain_prediction(clf, vol):
    h = I.tta_entropy(clf, vol, n=3, preset=AugmentationSpec.identity())
    p = clf.predict(vol)
    assert h == pytest.approx(float(I.binary_entropy(p).mean()), rel=1e-12)
    # identical draws: both reductions agree
    assert I.tta_entropy(clf, vol, 3, AugmentationSpec.identity(), mode="entropy_of_mean") == pytest.approx(h)


def test_tta_predictions_shape_and_seed(clf, vol):
    a = I.tta_predictions(clf, vol, n=4, seed=1)
    assert a.shape == (4, 2)
    np.testing.assert_array_equal(a, I.tta_predictions(clf, vol, n=4, seed=1))
    assert not np.array_equal(a[0], a[1])


def test_entropy_of_mean_is_at_least_mean_entropy(clf, vol):
    # concavity of the binary entropy
    assert I.tta_entropy(clf, vol, 6, mode="entropy_of_mean") >= I.tta_entropy(clf, vol, 6) - 1e-12


def test_tta_errors(clf, vol):
    with pytest.raises(InvalidArgument):
        I.tta_predictions(clf, vol, n=0)
    with pytest.raises(InvalidArgument):
        I.tta_entropy(clf, vol, 2, preset="wild")
    with pytest.raises(InvalidArgument):
        I.tta_entropy(clf, vol, 2, mode="max")


def test_dataset_entropy_report(clf, vol, tmp_path):
    rep = I.dataset_entropy(clf, [vol, vol], ["a", "b"], n=2)
    assert rep.mean == pytest.approx(np.mean(rep.per_case))
    rep.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "case_id,mean_entropy" and lines[1].startswith("a,") and lines[-1].startswith("# dataset_mean")
    with pytest.raises(InvalidArgument):
        I.dataset_entropy(clf, [])


def test_token_grid_order():
    g = I.token_grid(np.arange(2 * 3 * 4), (2, 3, 4))
    assert g.shape == (2, 3, 4)
    assert g[1, 0, 0] == 1 and g[0, 1, 0] == 2 and g[0, 0, 1] == 6


def test_gradcam_shape_and_range(clf, vol):
    sal = I.gradcam(clf, vol, 1)
    assert sal.dims == vol.dims and sal.target_class == 1
    assert sal.values.min() >= 0.0 and sal.values.max() == pytest.approx(1.0)
    with pytest.raises(InvalidArgument):
        I.gradcam(clf, vol, 2)


def test_gradcam_does_not_modify_classifier(clf, vol):
    before = {k: v.copy() for k, v in clf.params.items()}
    I.gradcam(clf, vol)
    for k in before:
        np.testing.assert_array_equal(clf.params[k], before[k])


def test_gradcam_channel_weights_match_finite_difference(clf, vol):
    # the gradient Grad-CAM reads off the last block equals a perturbation of that block's output
    tokens = M.patchify_array(vol.voxels[None], 4)
    trace = M.Trace()
    t = ag.parameter(tokens.astype(np.float64))
    params64 = M.cast_params(clf.params, np.float64)
    feats = F.features_tensor(params64, CFG, t, trace=trace)
    z, _ = F.head_forward(params64, clf.head, feats, False, clf.buffers)
    ag.sum_(z[:, 0]).backward()
    g = trace["blocks"][-1].grad
    h = trace["blocks"][-1].data
    norm_w, norm_b = params64["norm.weight"], params64["norm.bias"]

    def logit(hh):
        mu = hh.mean(-1, keepdims=True)
        var = hh.var(-1, keepdims=True)
        y = (hh - mu) / np.sqrt(var + 1e-6) * norm_w + norm_b
        f = np.concatenate([y[:, 0], y[:, 1:].mean(1)], -1)
        return float((f @ params64["head.weight"] + params64["head.bias"])[0, 0])

    eps = 1e-6
    for idx in [(0, 1, 0), (0, 5, 7), (0, 0, 3)]:
        up, down = h.copy(), h.copy()
        up[idx] += eps
        down[idx] -= eps
        assert g[idx] == pytest.approx((logit(up) - logit(down)) / (2 * eps), rel=1e-5, abs=1e-9)


def test_render_pgm_and_ppm(vol, tmp_path):
    I.render_slices(vol, "axial", 8, None, tmp_path / "a.pgm")
    gray = I.read_pnm(tmp_path / "a.pgm")
    assert gray.shape == (16, 16)
    expected = np.floor(np.clip(vol.voxels[:, :, 8].T, 0, 1) * 255 + 0.5).astype(np.uint8)
    np.testing.assert_array_equal(gray, expected)

    zero = I.SaliencyVolume(np.zeros(vol.dims), 0)
    I.render_slices(vol, "coronal", 3, zero, tmp_path / "z.ppm")
    rgb = I.read_pnm(tmp_path / "z.ppm")
    assert rgb.shape == (16, 16, 3)
    np.testing.assert_array_equal(rgb[..., 0], rgb[..., 1])  # no saliency -> grey

    full = I.SaliencyVolume(np.ones(vol.dims), 0)
    I.render_slices(vol, "sagittal", 0, full, tmp_path / "f.ppm")
    rgb = I.read_pnm(tmp_path / "f.ppm")
    assert np.all(rgb[..., 0] == 255) and np.all(rgb[..., 1] == 0)


def test_render_errors(vol, tmp_path):
    with pytest.raises(InvalidArgument):
        I.render_slices(vol, "oblique", 0, None, tmp_path / "x.pgm")
    with pytest.raises(InvalidArgument):
        I.render_slices(vol, "axial", 16, None, tmp_path / "x.pgm")
    with pytest.raises(InvalidArgument):
        I.render_slices(vol, "axial", 0, I.SaliencyVolume(np.zeros((8, 8, 8)), 0), tmp_path / "x.ppm")
    assert I.slice_image(Volume(np.zeros((4, 5, 6), np.float32)).voxels, "axial", 0).shape == (5, 4)
