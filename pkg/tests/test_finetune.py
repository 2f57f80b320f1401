"""Heads, fine-tuning with early stopping, frozen probes and classifier files."""

import warnings

import numpy as np
import pytest

from voxmae import finetune as F
from voxmae import model as M
from voxmae.engine import ScheduleSpec
from voxmae.errors import FormatError, InvalidArgument
from voxmae.metrics import auroc
from voxmae.volumes import AugmentationSpec, SyntheticSpec, generate_synthetic

CFG = M.tiny_config(input_dims=(16, 16, 16), patch_size=4, embed_dim=24, depth=1, heads=2,
                    decoder_dim=12, decoder_depth=1, decoder_heads=2)


@pytest.fixture(scope="module")
def data():
    vols, manifest = generate_synthetic(SyntheticSpec(dims=(16, 16, 16), n_volumes=24,
                                                      lesion_radius_range=(3.0, 4.0), seed=5))
    labels = manifest.labels
    return (vols[:16], labels[:16]), (vols[16:], labels[16:])


def _config(**kw):
    base = dict(model=CFG, schedule=ScheduleSpec(3e-3, 1, 4, 1e-6, 0.75), max_epochs=4, patience=None,
                micro_batch=4, accumulation_steps=2, augmentation=AugmentationSpec.identity())
    base.update(kw)
    return F.FinetuneConfig(**base)


def test_head_shapes():
    assert F.head_shapes(F.HeadConfig("linear", 3), 48) == {"head.weight": (48, 3), "head.bias": (3,)}
    probe = F.head_shapes(F.HeadConfig("ann_probe", 1), 48)
    assert probe["head.fc1.weight"] == (48, 128) and probe["head.fc2.weight"] == (128, 32)
    assert F.head_shapes(F.HeadConfig("mlp64", 2), 48)["head.bn.weight"] == (64,)
    with pytest.raises(InvalidArgument):
        F.HeadConfig("svm")
    with pytest.raises(InvalidArgument):
        F.HeadConfig("linear", 0)


def test_features_are_cls_and_mean():
    params = M.init_params(CFG, 0, include_decoder=False)
    vols, _ = generate_synthetic(SyntheticSpec(dims=(16, 16, 16), n_volumes=3, lesion_radius_range=(2, 3)))
    feats = F.extract_features(params, CFG, vols)
    rows = M.encode(params, CFG, M.patchify_array(np.stack([v.voxels for v in vols]), 4)).rows
    np.testing.assert_allclose(feats[:, :24], rows[:, 0], rtol=1e-6)
    np.testing.assert_allclose(feats[:, 24:], rows[:, 1:].mean(axis=1), rtol=1e-5, atol=1e-7)
    np.testing.assert_array_equal(F.extract_features(params, CFG, vols[1]), feats[1])


def test_mlp64_batch_norm_needs_two_samples():
    hc = F.HeadConfig("mlp64", 1)
    clf = F.new_classifier(CFG, hc)
    tokens = M.patchify_array(np.random.default_rng(0).random((1, 16, 16, 16)).astype(np.float32), 4)
    with pytest.raises(InvalidArgument):
        F.classification_objective(clf.params, CFG, hc, tokens, np.ones((1, 1)), np.ones(1), clf.buffers)


def test_mlp64_running_stats_update():
    hc = F.HeadConfig("mlp64", 1)
    clf = F.new_classifier(CFG, hc)
    tokens = M.patchify_array(np.random.default_rng(0).random((4, 16, 16, 16)).astype(np.float32), 4)
    updated = {}
    F.classification_objective(clf.params, CFG, hc, tokens, np.ones((4, 1)), np.ones(1), clf.buffers, updated)
    assert not np.allclose(updated["head.bn.running_mean"], 0)
    assert np.all(clf.buffers["head.bn.running_mean"] == 0)


def test_subsample_labels():
    labels = np.array([[1]] * 10 + [[0]] * 30)
    idx = F.subsample_labels(labels, 0.25, 0)
    assert len(idx) == 10 and labels[idx].sum() in (2, 3)
    assert idx == sorted(idx) == F.subsample_labels(labels, 0.25, 0)
    assert F.subsample_labels(labels, 1.0, 3) == list(range(40))
    with pytest.raises(InvalidArgument):
        F.subsample_labels(labels, 0.0, 0)
    rare = np.array([[1]] + [[0]] * 39)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        F.subsample_labels(rare, 0.1, 1)
    assert any("no positives" in str(w.message) for w in caught)


def test_best_epoch():
    assert F.best_epoch([0.5, 0.3, 0.4]) == 2
    assert F.best_epoch([0.3, 0.3, 0.4]) == 1
    with pytest.raises(InvalidArgument):
        F.best_epoch([])


def test_config_validation():
    with pytest.raises(InvalidArgument):
        _config(max_epochs=201)
    with pytest.raises(InvalidArgument):
        _config(label_fraction=0.0)
    with pytest.raises(InvalidArgument):
        _config(micro_batch=0)


def test_run_finetune_selects_lowest_validation(data):
    train, val = data
    rec = F.run_finetune(_config(), train, val, test=val)
    assert len(rec.val_loss) == len(rec.train_loss) == len(rec.test_auroc) == 4
    assert rec.best_epoch == F.best_epoch(rec.val_loss)
    w = F.pos_weights(train[1][rec.train_indices])
    assert F.classification_loss(rec.best, val[0], val[1], w) == pytest.approx(min(rec.val_loss), rel=1e-6)


def test_run_finetune_deterministic(data):
    train, val = data
    a = F.run_finetune(_config(max_epochs=2), train, val)
    b = F.run_finetune(_config(max_epochs=2), train, val)
    assert a.val_loss == b.val_loss


def test_patience_stops_early(data):
    train, val = data
    rec = F.run_finetune(_config(max_epochs=6, patience=1, schedule=ScheduleSpec(3e-1, 1, 6, 1e-6, 0.75)),
                         train, val)
    assert len(rec.val_loss) - rec.best_epoch <= 1
    assert len(rec.val_loss) == rec.best_epoch + 1 or len(rec.val_loss) == 6


def test_pretrained_encoder_is_used(data):
    train, val = data
    enc = M.init_params(CFG, 42)
    clf = F.new_classifier(CFG, F.HeadConfig(), enc, seed=0)
    np.testing.assert_array_equal(clf.params["blocks.0.attn.q.weight"], enc["blocks.0.attn.q.weight"])
    assert not any(k.startswith("decoder") for k in clf.params)


def test_frozen_probe_learns_separable_features():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, (80, 1))
    feats = rng.normal(size=(80, 48)) * 50 + 100  # large offset: standardisation matters
    feats[:, 0] += 150 * labels[:, 0]
    probe = F.train_frozen_probe(feats, labels, seed=0, epochs=40)
    assert auroc(probe.predict(feats)[:, 0], labels[:, 0]) > 0.95
    assert probe.loss_history[-1] < probe.loss_history[0]
    np.testing.assert_allclose(probe.shift, feats.mean(axis=0), rtol=1e-5)


def test_frozen_probe_leaves_encoder_untouched(data):
    enc = M.init_params(CFG, 1, include_decoder=False)
    before = {k: v.copy() for k, v in enc.items()}
    feats = F.extract_features(enc, CFG, data[0][0])
    F.train_frozen_probe(feats, data[0][1], epochs=3)
    for k in enc:
        np.testing.assert_array_equal(enc[k], before[k])


def test_classifier_file_round_trip(tmp_path, data):
    clf = F.new_classifier(CFG, F.HeadConfig("mlp64", 1), seed=3)
    clf.buffers["head.bn.running_mean"] += 0.25
    F.save_classifier(clf, tmp_path / "c.npz")
    back = F.load_classifier(tmp_path / "c.npz")
    assert back.cfg == CFG and back.head == clf.head
    np.testing.assert_array_equal(back.buffers["head.bn.running_mean"], clf.buffers["head.bn.running_mean"])
    np.testing.assert_array_equal(back.predict(data[1][0]), clf.predict(data[1][0]))


def test_probe_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    feats, labels = rng.normal(size=(20, 8)), rng.integers(0, 2, (20, 1))
    probe = F.train_frozen_probe(feats, labels, epochs=2)
    F.save_probe(probe, tmp_path / "p.npz")
    back = F.load_probe(tmp_path / "p.npz")
    np.testing.assert_array_equal(back.predict(feats), probe.predict(feats))
    with pytest.raises(FormatError):
        F.load_classifier(tmp_path / "p.npz")
    (tmp_path / "bad.npz").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        F.load_probe(tmp_path / "bad.npz")


def test_feature_table_round_trip(tmp_path):
    x = np.random.default_rng(2).normal(size=(5, 7)).astype(np.float32)
    F.write_feature_table(x, tmp_path / "f.f32")
    assert (tmp_path / "f.f32").stat().st_size == 5 * 7 * 4
    np.testing.assert_array_equal(F.read_feature_table(tmp_path / "f.f32"), x)
    (tmp_path / "f.f32.shape").write_text("6 7\n")
    with pytest.raises(InvalidArgument):
        F.read_feature_table(tmp_path / "f.f32")
