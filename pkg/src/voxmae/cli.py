"""``voxmae`` command line: synthesize, preprocess, pretrain, fine-tune, probe,
evaluate, explain and report.

Exit codes: 0 ok, 2 usage or configuration error, 3 I/O or format error,
4 numeric failure.  ``VOXMAE_THREADS`` pins the BLAS thread count.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import finetune as F
from . import interpret as I
from . import metrics as MT
from . import model as M
from . import pretrain as P
from . import volumes as V
from .config import RunConfig
from .errors import FormatError, InvalidArgument, NumericError, UndefinedMetric

log = logging.getLogger("voxmae")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SEED_SCHEMA = 1


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _seeds(args):
    return [args.seed + i for i in range(args.seeds)]


def _read_manifest(path, allow_empty=False):
    m = V.read_manifest(path)
    if not allow_empty and len(m) == 0:
        raise CliError(EXIT_USAGE, f"manifest {path} has no records")
    return m


def _load_all(manifest, manifest_path, unit=None):
    vols, bad = [], []
    for r in manifest.records:
        p = V.resolve_path(manifest_path, r.path)
        try:
            vols.append(V.read_volume(p, unit))
        except (OSError, FormatError) as e:
            bad.append(f"{p}: {e}")
    if bad:
        raise CliError(EXIT_IO, "unreadable volumes:\n  " + "\n  ".join(bad))
    return vols


def _split(cfg: RunConfig, manifest):
    f = cfg["finetune"]
    return V.split_dataset(manifest, V.SplitSpec(f["split"], seed=f["seed"], stratify=f["stratify"]))


def _part(vols, manifest, split, name):
    idx = list(range(len(manifest))) if name == "all" else split.indices(name)
    return [vols[i] for i in idx], manifest.labels[idx], idx


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _seed_metrics(task, model, seed, scores, labels, class_names, config_hash, extra=None):
    res = MT.evaluate(scores, labels)
    doc = {"schema": SEED_SCHEMA, "kind": "seed_metrics", "task": task, "model": model, "seed": seed,
           "class_names": list(class_names), "config_hash": config_hash,
           "AUROC": res["AUROC"].per_class, "AUPRC": res["AUPRC"].per_class}
    doc.update(extra or {})
    return doc


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = _config(args)
    spec = cfg.synthetic_spec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vols, manifest = V.generate_synthetic(spec)
    for v, r in zip(vols, manifest.records):
        V.write_volume(v, out / r.path)
    path = out / "manifest.tsv"
    V.write_manifest(manifest, path)
    print(path)


def cmd_preprocess(args):
    manifest = _read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vols = _load_all(manifest, args.manifest)
    size = (args.size,) * 3
    skipped = 0
    for v, r in zip(vols, manifest.records):
        v = V.resample_volume(v, size)
        if v.unit == V.HU:
            v = V.clip_normalize(v, args.hu_lo, args.hu_hi)
        else:
            skipped += 1
        V.write_volume(v, out / Path(r.path).name)
    if skipped:
        log.warning("%d of %d volumes were already normalized and were only resampled", skipped, len(vols))
    records = [V.Record(Path(r.path).name, r.labels, r.subject) for r in manifest.records]
    path = out / "manifest.tsv"
    V.write_manifest(V.DatasetManifest(records, manifest.class_names), path)
    print(path)


def cmd_pretrain(args):
    cfg = _config(args)
    overrides = {"checkpoint_dir": str(args.out)}
    if args.corpus_fraction is not None:
        overrides["corpus_fraction"] = args.corpus_fraction
    if args.seed is not None:
        overrides["seed"] = args.seed
    pc = cfg.pretrain_config(**overrides)
    manifest = _read_manifest(args.manifest)
    vols = _load_all(manifest, args.manifest)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    resume = P.load_checkpoint(args.from_checkpoint, pc.hash()) if args.from_checkpoint else None
    t0 = time.perf_counter()
    state = P.run_pretraining(pc, vols, manifest, resume=resume, epochs=args.epochs)
    P.save_checkpoint(state, Path(args.out) / "last.ckpt")
    P.write_loss_csv(state, Path(args.out) / "loss.csv")
    _write_json(Path(args.out) / "timing.json", {"wall_clock_s": time.perf_counter() - t0, "epoch": state.epoch})
    print(Path(args.out) / "last.ckpt")


def _encoder(args, cfg):
    if not args.from_checkpoint:
        return None
    ckpt = P.load_checkpoint(args.from_checkpoint)
    if ckpt.model is not None and ckpt.model != cfg:
        raise CliError(EXIT_USAGE, "checkpoint model configuration differs from [model]")
    return ckpt.params


def cmd_finetune(args):
    cfg = _config(args)
    manifest = _read_manifest(args.manifest)
    vols = _load_all(manifest, args.manifest)
    split = _split(cfg, manifest)
    train, val, test = (_part(vols, manifest, split, n) for n in V.SPLITS)
    model_cfg = cfg.model_config()
    encoder = _encoder(args, model_cfg)
    name = args.model_name or ("pretrained" if encoder is not None else "scratch")
    out = Path(args.out)
    for seed in _seeds(args):
        overrides = {"seed": seed}
        if args.label_fraction is not None:
            overrides["label_fraction"] = args.label_fraction
        if args.head:
            overrides["head"] = F.HeadConfig(args.head, len(manifest.class_names))
        fc = cfg.finetune_config(len(manifest.class_names), **overrides)
        t0 = time.perf_counter()
        rec = F.run_finetune(fc, train[:2], val[:2], encoder=encoder)
        d = out / name / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        F.save_classifier(rec.best, d / "classifier.npz")
        rec.write_csv(d / "curve.csv")
        doc = _seed_metrics(args.task, name, seed, rec.best.predict(test[0]), test[1], manifest.class_names,
                            cfg.hash(), {"best_epoch": rec.best_epoch, "label_fraction": fc.label_fraction})
        _write_json(out / f"metrics_{name}_seed{seed}.json", doc)
        _write_json(d / "timing.json", {"wall_clock_s": time.perf_counter() - t0})
        print(d / "classifier.npz")


def cmd_probe(args):
    cfg = _config(args)
    manifest = _read_manifest(args.manifest)
    vols = _load_all(manifest, args.manifest)
    split = _split(cfg, manifest)
    model_cfg = cfg.model_config()
    encoder = _encoder(args, model_cfg)
    if encoder is None:
        encoder = M.init_params(model_cfg, args.seed, include_decoder=False)
        log.warning("no checkpoint given; probing a randomly initialised encoder")
    feats = F.extract_features(encoder, model_cfg, vols)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    F.write_feature_table(feats, out / "features.f32")
    labels = manifest.labels
    tr, te = split.indices("train"), split.indices("test")
    name = args.model_name or "frozen"
    f = cfg["finetune"]
    for seed in _seeds(args):
        probe = F.train_frozen_probe(feats[tr], labels[tr], F.HeadConfig("ann_probe", labels.shape[1]), seed=seed,
                                     epochs=f["probe_epochs"], lr=f["probe_lr"])
        F.save_probe(probe, out / f"probe_seed{seed}.npz")
        doc = _seed_metrics(args.task, name, seed, probe.predict(feats[te]), labels[te], manifest.class_names,
                            cfg.hash())
        _write_json(out / f"metrics_{name}_seed{seed}.json", doc)
    print(out / "features.f32")


def cmd_eval(args):
    cfg = _config(args)
    manifest = _read_manifest(args.test_manifest)
    vols = _load_all(manifest, args.test_manifest)
    split = _split(cfg, manifest) if args.split != "all" else None
    test_vols, test_labels, _ = _part(vols, manifest, split, args.split)
    clf = F.load_classifier(args.classifier)
    extra = {"test_manifest": str(args.test_manifest), "split": args.split}
    if args.train_manifest:
        extra["train_manifest"] = str(args.train_manifest)
    doc = _seed_metrics(args.task, args.model_name, args.seed, clf.predict(test_vols), test_labels,
                        manifest.class_names, cfg.hash(), extra)
    _write_json(args.out, doc)
    print(args.out)


def cmd_gradcam(args):
    clf = F.load_classifier(args.classifier)
    v = V.read_volume(args.volume)
    sal = I.gradcam(clf, v, args.target_class)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    V.write_volume(V.Volume(sal.values.astype(np.float32), v.spacing, V.NORMALIZED), out / "saliency.tvol")
    index = args.index if args.index is not None else v.dims[{"axial": 2, "coronal": 1, "sagittal": 0}[args.plane]] // 2
    I.render_slices(v, args.plane, index, sal, out / f"{args.plane}_{index}.ppm")
    I.render_slices(v, args.plane, index, None, out / f"{args.plane}_{index}.pgm")
    print(out / "saliency.tvol")


def cmd_entropy(args):
    cfg = _config(args)
    manifest = _read_manifest(args.manifest)
    vols = _load_all(manifest, args.manifest)
    split = _split(cfg, manifest) if args.split != "all" else None
    sel, _, idx = _part(vols, manifest, split, args.split)
    clf = F.load_classifier(args.classifier)
    e = cfg["eval"]
    n = args.n if args.n is not None else e["tta_n"]
    report = I.dataset_entropy(clf, sel, [manifest.records[i].path for i in idx], n=n, seed=args.seed,
                               preset=e["tta_preset"], mode=e["entropy_mode"])
    report.write_csv(args.out)
    print(f"{report.mean:.6f}")


def cmd_report(args):
    cfg = _config(args)
    paths = sorted({p for pattern in args.inputs for p in glob.glob(pattern)})
    if not paths:
        raise CliError(EXIT_USAGE, "no metric files matched")
    by_model = {}
    for p in paths:
        doc = json.loads(Path(p).read_text())
        if doc.get("kind") != "seed_metrics":
            raise FormatError(f"{p}: not a per-seed metrics file")
        by_model.setdefault(doc["model"], []).append(doc)
    reports = {}
    for model, docs in sorted(by_model.items()):
        docs.sort(key=lambda d: d["seed"])
        per_class = {k: [d[k] for d in docs] for k in ("AUROC", "AUPRC")}
        mean = {k: [float(np.mean(row)) for row in v] for k, v in per_class.items()}
        reports[model] = MT.MetricReport(docs[0]["task"], model, [d["seed"] for d in docs], per_class, mean,
                                         docs[0]["class_names"])
    comparisons = MT.compare_models({m: r.mean["AUROC"] for m, r in reports.items()}, cfg["eval"]["t_test"])
    e = cfg["eval"]
    kwh, co2 = MT.energy_ledger(e["n_devices"], e["watts_per_device"], e["hours_per_epoch"], e["epochs"],
                                e["kg_co2_per_kwh"])
    doc = {
        "schema": MT.REPORT_SCHEMA,
        "kind": "experiment_report",
        "config_hash": cfg.hash(),
        "inputs": paths,
        "models": {m: json.loads(r.to_json()) for m, r in reports.items()},
        "comparisons": [c.__dict__ for c in comparisons],
        "energy": {"kwh": kwh, "kg_co2": co2},
    }
    _write_json(args.out, doc)
    print(args.out)


# ---------------------------------------------------------------------------
# parser


def build_parser():
    ap = argparse.ArgumentParser(prog="voxmae", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="run configuration file")
        return p

    p = cmd("synth", cmd_synth, "generate the synthetic lesion corpus")
    p.add_argument("--out", required=True)

    p = cmd("preprocess", cmd_preprocess, "resample and HU-normalize a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--hu-lo", type=float, default=-1200.0)
    p.add_argument("--hu-hi", type=float, default=800.0)

    p = cmd("pretrain", cmd_pretrain, "masked-autoencoder pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="run at most this many epochs in this call")
    p.add_argument("--from-checkpoint", help="resume from a pretraining checkpoint")
    p.add_argument("--corpus-fraction", type=float)
    p.add_argument("--seed", type=int)

    for name, fn, help_ in (("finetune", cmd_finetune, "end-to-end fine-tuning"),
                            ("probe", cmd_probe, "frozen-embedding probe")):
        p = cmd(name, fn, help_)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--from-checkpoint", help="pretrained checkpoint (omit to start from scratch)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--seeds", type=int, default=1, help="run seeds seed, seed+1, ...")
        p.add_argument("--model-name")
        p.add_argument("--task", default="task")
        if name == "finetune":
            p.add_argument("--label-fraction", type=float)
            p.add_argument("--head", choices=F.HEAD_KINDS)

    p = cmd("eval", cmd_eval, "evaluate a classifier on a (possibly different) manifest")
    p.add_argument("--classifier", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--train-manifest", help="recorded for provenance; nothing is retrained")
    p.add_argument("--split", choices=("all",) + V.SPLITS, default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--model-name", default="model")
    p.add_argument("--task", default="task")
    p.add_argument("--seed", type=int, default=0)

    p = cmd("gradcam", cmd_gradcam, "Grad-CAM saliency for one volume")
    p.add_argument("--classifier", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--target-class", type=int, default=0)
    p.add_argument("--plane", choices=I.PLANES, default="axial")
    p.add_argument("--index", type=int)
    p.add_argument("--out", required=True)

    p = cmd("entropy", cmd_entropy, "test-time-augmentation entropy")
    p.add_argument("--classifier", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("all",) + V.SPLITS, default="test")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = cmd("report", cmd_report, "merge per-seed metric files")
    p.add_argument("inputs", nargs="+", help="metric JSON files or glob patterns")
    p.add_argument("--out", required=True)
    return ap


def _pin_threads():
    n = os.environ.get("VOXMAE_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _pin_threads()
        args.fn(args)
    except CliError as e:
        print(f"voxmae: {e}", file=sys.stderr)
        return e.code
    except (FormatError, OSError) as e:
        print(f"voxmae: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, UndefinedMetric, FloatingPointError) as e:
        print(f"voxmae: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidArgument, ValueError) as e:
        print(f"voxmae: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
