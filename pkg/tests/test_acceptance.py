"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The learning criteria share one desk-scale protocol (``voxmae.desk``):
a single pretraining run, then pretrained and scratch fine-tunes at 100%
and 10% labels for seeds 0-4.  Expect roughly 15 minutes on one core.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdicts are
repeated in the "acceptance criteria" section of the terminal summary.
"""

import itertools
import time
import tracemalloc

import mpmath
import numpy as np
import pytest

import gradcheck
from test_metrics import brute_auroc, mp_welch, step_auprc
from voxmae import desk
from voxmae import finetune as F
from voxmae import interpret as I
from voxmae import metrics as MT
from voxmae import model as M
from voxmae import pretrain as P
from voxmae.volumes import Volume, read_volume, write_volume

SEEDS = range(5)
INITS = ("pretrained", "scratch")


# ---------------------------------------------------------------------------
# shared desk-scale runs


class Desk:
    """Lazily computed runs shared by criteria 5-10."""

    def __init__(self):
        self._cache = {}

    def _get(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    @property
    def corpus(self):
        return self._get("corpus", lambda: desk.pretrain_corpus()[0])

    @property
    def task(self):
        return self._get("task", desk.lesion_task)

    @property
    def pretrained(self):
        def make():
            t0 = time.perf_counter()
            state = P.run_pretraining(desk.pretrain_config(), self.corpus)
            return state, time.perf_counter() - t0
        return self._get("pretrained", make)

    def encoder(self, init):
        return M.encoder_params(self.pretrained[0].params) if init == "pretrained" else None

    def finetune(self, init, seed, fraction):
        def make():
            t = self.task
            return F.run_finetune(desk.finetune_config(seed, fraction), t.part("train"), t.part("val"),
                                  t.part("test"), encoder=self.encoder(init))
        return self._get(("ft", init, seed, fraction), make)

    def test_auroc(self, init, seed, fraction):
        def make():
            vols, labels = self.task.part("test")
            return MT.mean_auroc(self.finetune(init, seed, fraction).best.predict(vols), labels)
        return self._get(("auroc", init, seed, fraction), make)


@pytest.fixture(scope="module")
def runs():
    return Desk()


# ---------------------------------------------------------------------------
# 1. gradients


def test_c01_gradients_match_finite_differences(criterion):
    # 128 entries per parameter group (always including the largest gradient);
    # the every-scalar sweep lives in test_engine.py as a slow test
    t0 = time.perf_counter()
    worst = {}
    for name, build in (("mae", gradcheck.mae_problem), ("classification", gradcheck.classification_problem)):
        params, loss = build()
        assert all(v.dtype == np.float64 for v in params.values())
        per_group = gradcheck.check(params, loss, per_group=128)
        worst[name] = (max(per_group.values()), len(per_group))
    elapsed = time.perf_counter() - t0
    ok = all(w <= 1e-6 for w, _ in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} max rel err {w:.2e} over {n} groups" for k, (w, n) in worst.items())
    criterion(1, ok, f"{detail}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. metric oracles


def test_c02_metric_oracles(criterion):
    rng = np.random.default_rng(20)
    auroc_err, done = 0.0, 0
    while done < 1000:
        n = int(rng.integers(2, 33))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        scores = rng.integers(0, 5, n) / 4.0 if done % 2 else rng.random(n)
        auroc_err = max(auroc_err, abs(MT.auroc(scores, labels) - brute_auroc(scores.tolist(), labels.tolist())))
        done += 1

    auprc_err, patterns = 0.0, 0
    for n in range(1, 17):
        scores = rng.integers(0, 6, n) / 5.0  # ties included
        s_list = scores.tolist()
        for bits in itertools.product((0, 1), repeat=n):
            if not any(bits):
                continue
            auprc_err = max(auprc_err, abs(MT.auprc(scores, bits) - step_auprc(s_list, list(bits))))
            patterns += 1

    welch_err = 0.0
    for _ in range(200):
        na, nb = rng.integers(2, 10, 2)
        a, b = rng.normal(0.9, rng.uniform(0.002, 0.05), na), rng.normal(0.88, rng.uniform(0.002, 0.05), nb)
        welch_err = max(welch_err, abs(MT.t_test_two_sided(a, b) - float(mp_welch(a, b))))

    mpmath.mp.dps = 50
    ci_err = 0.0
    for _ in range(200):
        vals = rng.uniform(0.7, 0.95, int(rng.integers(2, 8)))
        agg = MT.aggregate_seeds(vals)
        v = [mpmath.mpf(float(x)) for x in vals]
        mean = mpmath.fsum(v) / len(v)
        se = mpmath.sqrt(mpmath.fsum((x - mean) ** 2 for x in v) / (len(v) - 1)) / mpmath.sqrt(len(v))
        ci_err = max(ci_err, abs(agg.mean - float(mean)), abs(agg.ci95 - float(mpmath.mpf("1.96") * se)))
    p = rng.uniform(0, 0.2, 6)
    bonf_err = max(abs(x - float(min(1, 6 * mpmath.mpf(float(q))))) for x, q in zip(MT.bonferroni(p), p))

    ok = auroc_err <= 1e-12 and auprc_err <= 1e-12 and max(welch_err, ci_err, bonf_err) <= 1e-9
    criterion(2, ok, f"AUROC err {auroc_err:.1e} (1000 cases), AUPRC err {auprc_err:.1e} ({patterns} patterns), "
                     f"Welch {welch_err:.1e}, CI {ci_err:.1e}, Bonferroni {bonf_err:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. masking arithmetic


def test_c03_masking_arithmetic(criterion):
    plan = M.random_mask(4096, 0.75, 0)
    counts_ok = plan.n_visible == 1024 and int(plan.masked_flags.sum()) == 3072
    rng = np.random.default_rng(3)
    bad = 0
    for i in range(10_000):
        n = int(rng.integers(2, 5000))
        ratio = float(rng.uniform(0.05, 0.95))
        if round((1 - ratio) * n) in (0, n):
            ratio = 0.5
        p = M.random_mask(n, ratio, [3, i])
        x = rng.random(n)
        if not (np.array_equal(x[p.shuffle][p.restore], x) and np.array_equal(p.restore[p.shuffle], np.arange(n))
                and p.n_visible == round((1 - ratio) * n)):
            bad += 1
    ok = counts_ok and bad == 0
    criterion(3, ok, f"4096 tokens -> {plan.n_visible} visible / {int(plan.masked_flags.sum())} masked; "
                     f"{bad} of 10000 plans break restore-after-shuffle")
    assert ok


# ---------------------------------------------------------------------------
# 4. round trips


def test_c04_round_trips(criterion, tmp_path):
    rng = np.random.default_rng(4)
    bad_patch = bad_file = 0
    for i in range(200):
        p = int(rng.integers(1, 5))
        dims = tuple(int(p * g) for g in rng.integers(1, 5, 3))
        vox = rng.random(dims).astype(np.float32)
        if i % 3 == 0:
            vox = rng.normal(-400, 300, dims).astype(np.float32)  # HU-like values
        spacing = tuple(rng.uniform(0.5, 2.5, 3).astype(np.float32).tolist())  # the header holds 32-bit floats
        v = Volume(vox, spacing, "HU" if i % 3 == 0 else "normalized")
        back = M.unpatchify(M.patchify(v, p))
        bad_patch += back.voxels.tobytes() != v.voxels.tobytes()
        write_volume(v, tmp_path / f"{i}.tvol")
        r = read_volume(tmp_path / f"{i}.tvol")
        bad_file += not (r.equals(v) and np.ascontiguousarray(r.voxels).tobytes() == v.voxels.tobytes())
    ok = bad_patch == 0 and bad_file == 0
    criterion(4, ok, f"200 volumes: {bad_patch} patchify mismatches, {bad_file} TVOL mismatches")
    assert ok


# ---------------------------------------------------------------------------
# 5. pretraining learns


def _masked_mse(params, cfg, volumes, constant=None):
    tokens = M.patchify_array(np.stack([v.voxels for v in volumes]), cfg.patch_size).astype(np.float64)
    plans = [M.random_mask(cfg.n_tokens, cfg.mask_ratio, [999, i]) for i in range(len(volumes))]
    errs = []
    for i in range(0, len(volumes), 16):
        t, pl = tokens[i:i + 16], plans[i:i + 16]
        recon = np.full_like(t, constant) if constant is not None else M.reconstruct(params, cfg, t.astype(np.float32), pl)
        for j, p in enumerate(pl):
            errs.append(((recon[j][p.masked_flags] - t[j][p.masked_flags]) ** 2).ravel())
    return float(np.concatenate(errs).mean())


def test_c05_pretraining_learns(criterion, runs):
    state, seconds = runs.pretrained
    cfg = desk.model_config()
    before = _masked_mse(M.init_params(cfg, desk.pretrain_config().seed), cfg, runs.corpus)
    after = _masked_mse(state.params, cfg, runs.corpus)
    baseline = _masked_mse(None, cfg, runs.corpus, constant=0.5)
    steps = len(state.step_losses)
    ok = steps <= 200 and after <= 0.5 * before and after < baseline and seconds < 600
    criterion(5, ok, f"masked MSE {before:.4f} -> {after:.4f} ({after / before:.0%}) after {steps} steps; "
                     f"constant-0.5 baseline {baseline:.4f}; {seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6. transfer beats scratch


def _first_at_least(curve, level):
    hits = [i + 1 for i, a in enumerate(curve) if a >= level]
    return hits[0] if hits else None


def test_c06_transfer_beats_scratch(criterion, runs):
    low = {init: [runs.test_auroc(init, s, 0.1) for s in SEEDS] for init in INITS}
    curves = {init: np.mean([runs.finetune(init, s, 1.0).test_auroc for s in SEEDS], axis=0) for init in INITS}
    reach = {init: _first_at_least(curves[init], 0.95) for init in INITS}
    low_ok = np.mean(low["pretrained"]) >= np.mean(low["scratch"])
    full_ok = reach["pretrained"] is not None and (reach["scratch"] is None or reach["scratch"] > reach["pretrained"])
    for init in INITS:
        print(f"{init:10s} 100% seed-mean test AUROC by epoch: " + " ".join(f"{a:.3f}" for a in curves[init]))
    ok = low_ok and full_ok
    criterion(6, ok, f"10% labels: pretrained {np.mean(low['pretrained']):.3f} vs scratch {np.mean(low['scratch']):.3f}; "
                     f"100% labels: AUROC>=0.95 first at epoch {reach['pretrained']} (pretrained) vs "
                     f"{reach['scratch']} (scratch), final {curves['pretrained'][-1]:.3f} vs {curves['scratch'][-1]:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 7. early stopping


def test_c07_early_stopping_selects_argmin(criterion, runs):
    t = runs.task
    checked = wrong = 0
    for init, s, frac in itertools.product(INITS, SEEDS, (1.0, 0.1)):
        rec = runs.finetune(init, s, frac)
        labels = t.part("train")[1][rec.train_indices]
        kept = F.classification_loss(rec.best, *t.part("val"), F.pos_weights(labels))
        good = rec.best_epoch == int(np.argmin(rec.val_loss)) + 1 and np.isclose(kept, min(rec.val_loss), rtol=1e-6)
        wrong += not good
        checked += 1
    ok = wrong == 0
    criterion(7, ok, f"{checked - wrong} of {checked} runs keep the lowest-validation-loss epoch")
    assert ok


# ---------------------------------------------------------------------------
# 8. frozen probe


def test_c08_frozen_probe(criterion, runs):
    t = runs.task
    enc = runs.encoder("pretrained")
    cfg = desk.model_config()
    (tr_v, tr_y), (te_v, te_y) = t.part("train"), t.part("test")
    f_tr, f_te = F.extract_features(enc, cfg, tr_v), F.extract_features(enc, cfg, te_v)
    probe = [MT.mean_auroc(F.train_frozen_probe(f_tr, tr_y, seed=s).predict(f_te), te_y) for s in SEEDS]
    tuned = [runs.test_auroc("pretrained", s, 1.0) for s in SEEDS]
    ok = np.mean(probe) >= 0.8 and np.mean(probe) <= np.mean(tuned)
    criterion(8, ok, f"probe AUROC {np.mean(probe):.3f} (seeds {', '.join(f'{a:.3f}' for a in probe)}) vs "
                     f"fine-tuned {np.mean(tuned):.3f} on the same seeds")
    assert ok


# ---------------------------------------------------------------------------
# 9. saliency localisation


def test_c09_gradcam_localises(criterion, runs):
    t = runs.task
    clf = runs.finetune("pretrained", 0, 1.0).best
    vols, labels = t.part("test")
    masks = t.masks_of("test")
    cases = [i for i in range(len(vols)) if labels[i, 0] == 1][:20]
    hits = 0
    for i in cases:
        sal = I.gradcam(clf, vols[i]).values
        hits += sal[masks[i]].mean() > sal[~masks[i]].mean()
    ok = len(cases) == 20 and hits >= 14
    criterion(9, ok, f"inside-lesion saliency exceeds outside in {hits} of {len(cases)} positive test cases")
    assert ok


# ---------------------------------------------------------------------------
# 10. uncertainty


def test_c10_tta_entropy(criterion, runs):
    vols = runs.task.part("test")[0]
    ent = {init: [I.dataset_entropy(runs.finetune(init, s, 1.0).best, vols, n=50, seed=s).mean for s in SEEDS]
           for init in INITS}
    ok = np.mean(ent["pretrained"]) <= np.mean(ent["scratch"])
    criterion(10, ok, f"mean TTA entropy (n=50, 5 seeds): pretrained {np.mean(ent['pretrained']):.4f} vs "
                      f"scratch {np.mean(ent['scratch']):.4f} nats")
    assert ok


# ---------------------------------------------------------------------------
# 11-13. parameter count, energy ledger, visible-token economy


def test_c11_parameter_count(criterion):
    tracemalloc.start()
    n = M.count_parameters(M.ModelConfig(), include_decoder=False)
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    ok = abs(n - 312e6) <= 0.1 * 312e6 and peak < 1 << 20
    criterion(11, ok, f"default encoder has {n:,} parameters ({n / 312e6 - 1:+.1%} vs 312M); peak allocation {peak} B")
    assert ok


def test_c12_energy_ledger(criterion):
    kwh, co2 = MT.energy_ledger(4, 300, 1.5, 400, 0.4)
    other = MT.energy_ledger(192, 300, 1.0, 90, 0.4)
    ok = kwh == 720.0 and co2 == 288.0 and other[0] == 5184.0 and round(other[1]) == 2074
    criterion(12, ok, f"4 x 300 W x 1.5 h x 400 epochs -> {kwh} kWh, {co2} kg CO2")
    assert ok


def test_c13_visible_token_economy(criterion):
    cfg = desk.model_config()
    params = M.init_params(cfg, 0)
    tokens = M.patchify_array(np.random.default_rng(13).random((8,) + cfg.input_dims).astype(np.float32),
                              cfg.patch_size)
    plans = [M.random_mask(cfg.n_tokens, cfg.mask_ratio, i) for i in range(8)]

    def best_of(fn, reps=30):
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    full = best_of(lambda: M.encode(params, cfg, tokens))
    visible = best_of(lambda: M.encode(params, cfg, tokens, plans))
    ok = full >= 2 * visible
    criterion(13, ok, f"all-token encode {full * 1e3:.2f} ms vs visible-only {visible * 1e3:.2f} ms "
                      f"({full / visible:.1f}x)")
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
