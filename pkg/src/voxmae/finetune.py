"""Downstream adaptation: features, heads, fine-tuning and frozen probes."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import model as M
from .engine import (AdamState, ScheduleSpec, accumulate, adam_step, lr_at, param_lrs, pos_weights,
                     value_and_grad, weighted_bce)
from .errors import FormatError, InvalidArgument, NumericError
from .metrics import mean_auroc
from .volumes import AugmentationSpec, Volume, augment, subsample_indices

log = logging.getLogger(__name__)

HEAD_KINDS = ("linear", "mlp64", "ann_probe")


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "linear"
    class_count: int = 1
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise InvalidArgument(f"unknown head kind {self.kind!r}")
        if self.class_count < 1:
            raise InvalidArgument("class_count must be >= 1")


def head_shapes(head: HeadConfig, in_dim):
    k = head.class_count
    if head.kind == "linear":
        return {"head.weight": (in_dim, k), "head.bias": (k,)}
    if head.kind == "mlp64":
        return {"head.fc1.weight": (in_dim, 64), "head.fc1.bias": (64,),
                "head.bn.weight": (64,), "head.bn.bias": (64,),
                "head.fc2.weight": (64, k), "head.fc2.bias": (k,)}
    return {"head.fc1.weight": (in_dim, 128), "head.fc1.bias": (128,),
            "head.fc2.weight": (128, 32), "head.fc2.bias": (32,),
            "head.out.weight": (32, k), "head.out.bias": (k,)}


def init_head(head: HeadConfig, in_dim, seed=0, dtype=np.float32):
    """Head parameters plus batch-norm running statistics (``buffers``)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in head_shapes(head, in_dim).items():
        if name.startswith("head.bn.weight"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif head.kind == "linear":
            params[name] = M.trunc_normal(rng, shape, dtype=dtype)
        else:
            # He-uniform for the rectified hidden layers
            bound = np.sqrt(6.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, shape).astype(dtype)
    buffers = {}
    if head.kind == "mlp64":
        buffers = {"head.bn.running_mean": np.zeros(64, dtype=dtype),
                   "head.bn.running_var": np.ones(64, dtype=dtype)}
    return params, buffers


def head_forward(p, head: HeadConfig, feats, train=False, buffers=None):
    """Logits (B, k).  In training mode batch norm uses batch statistics and
    returns updated running statistics as the second element."""
    p = _wrap(p)
    new_buffers = dict(buffers or {})
    if head.kind == "linear":
        return ag.linear(feats, p["head.weight"], p["head.bias"]), new_buffers
    if head.kind == "mlp64":
        h = ag.leaky_relu(ag.linear(feats, p["head.fc1.weight"], p["head.fc1.bias"]), head.leaky_slope)
        if train:
            if h.shape[0] < 2:
                raise InvalidArgument("batch norm needs at least 2 samples per microbatch")
            h, mu, var = ag.batch_norm(h, p["head.bn.weight"], p["head.bn.bias"])
            n = h.shape[0]
            mom = head.bn_momentum
            new_buffers["head.bn.running_mean"] = ((1 - mom) * buffers["head.bn.running_mean"] + mom * mu).astype(mu.dtype)
            new_buffers["head.bn.running_var"] = ((1 - mom) * buffers["head.bn.running_var"]
                                                  + mom * var * n / (n - 1)).astype(var.dtype)
        else:
            mean = buffers["head.bn.running_mean"]
            inv = 1.0 / np.sqrt(buffers["head.bn.running_var"] + 1e-5)
            h = ag.add(ag.mul(ag.mul(ag.sub(h, mean), inv), p["head.bn.weight"]), p["head.bn.bias"])
        return ag.linear(h, p["head.fc2.weight"], p["head.fc2.bias"]), new_buffers
    h = ag.relu(ag.linear(feats, p["head.fc1.weight"], p["head.fc1.bias"]))
    h = ag.relu(ag.linear(h, p["head.fc2.weight"], p["head.fc2.bias"]))
    return ag.linear(h, p["head.out.weight"], p["head.out.bias"]), new_buffers


# ---------------------------------------------------------------------------
# features and inference


def features_tensor(params, cfg: M.ModelConfig, tokens, trace=None):
    """Class token concatenated with the mean of the patch tokens, (B, 2D)."""
    latent = M.encode(params, cfg, tokens, None, trace=trace)
    h = latent.tokens
    cls = h[:, 0, :]
    pooled = ag.mean(h[:, 1:, :], axis=1)
    return ag.concat([cls, pooled], axis=-1)


def _tokens(cfg, volumes):
    if isinstance(volumes, Volume):
        volumes = [volumes]
    for v in volumes:
        if v.dims != cfg.input_dims:
            raise InvalidArgument(f"volume dims {v.dims} do not match model {cfg.input_dims}")
    vox = np.stack([v.voxels for v in volumes]).astype(np.float32)
    return M.patchify_array(vox, cfg.patch_size)


def extract_features(params, cfg: M.ModelConfig, volumes, batch_size=16) -> np.ndarray:
    """Feature vectors (n, 2*embed_dim) for one volume or a list, no masking."""
    vols = [volumes] if isinstance(volumes, Volume) else list(volumes)
    out = [features_tensor(params, cfg, _tokens(cfg, vols[i:i + batch_size])).data
           for i in range(0, len(vols), batch_size)]
    feats = np.concatenate(out)
    return feats[0] if isinstance(volumes, Volume) else feats


@dataclass
class Classifier:
    """Encoder + head parameters bundled with their configuration."""
    cfg: M.ModelConfig
    head: HeadConfig
    params: dict
    buffers: dict = field(default_factory=dict)

    def logits(self, volumes, batch_size=16):
        vols = [volumes] if isinstance(volumes, Volume) else list(volumes)
        out = []
        for i in range(0, len(vols), batch_size):
            f = features_tensor(self.params, self.cfg, _tokens(self.cfg, vols[i:i + batch_size]))
            out.append(head_forward(_wrap(self.params), self.head, f, False, self.buffers)[0].data)
        return np.concatenate(out)

    def predict(self, volumes, batch_size=16):
        return predict(self, volumes, batch_size)


def _wrap(params):
    return {k: v if isinstance(v, ag.Tensor) else ag.Tensor(v) for k, v in params.items()}


def predict(clf: Classifier, volumes, batch_size=16) -> np.ndarray:
    """Per-class sigmoid probabilities; no augmentation is applied."""
    z = clf.logits(volumes, batch_size).astype(np.float64)
    p = ag._sigmoid(z)
    return p[0] if isinstance(volumes, Volume) else p


def new_classifier(cfg, head: HeadConfig, encoder=None, seed=0) -> Classifier:
    """Classifier from pretrained encoder weights, or randomly initialised."""
    if encoder is None:
        encoder = M.init_params(cfg, seed, include_decoder=False)
    params = {k: np.array(v, dtype=np.float32) for k, v in M.encoder_params(encoder).items()}
    hp, buffers = init_head(head, 2 * cfg.embed_dim, seed + 1)
    params.update(hp)
    return Classifier(cfg, head, params, buffers)


# ---------------------------------------------------------------------------
# label subsampling


def subsample_labels(labels, fraction, seed):
    """Seeded, class-stratified subset of training rows (sorted indices).

    Warns when a class that had positives loses all of them.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgument(f"fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels).reshape(len(labels), -1)
    if fraction == 1.0:
        return list(range(len(labels)))
    idx = subsample_indices(labels, fraction, seed)
    lost = (labels.sum(axis=0) > 0) & (labels[idx].sum(axis=0) == 0)
    if lost.any():
        warnings.warn(f"classes {np.flatnonzero(lost).tolist()} have no positives after subsampling")
    return idx


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec.finetune)
    label_fraction: float = 1.0
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec.finetune)
    max_epochs: int = 200
    patience: int | None = 20
    micro_batch: int = 1
    accumulation_steps: int = 12
    seed: int = 0
    pos_weight_direction: str = "neg_over_pos"
    lr_granularity: str = "epoch"

    def __post_init__(self):
        if not 0.0 < self.label_fraction <= 1.0:
            raise InvalidArgument("label_fraction must be in (0, 1]")
        if not 1 <= self.max_epochs <= 200:
            raise InvalidArgument("max_epochs must be in [1, 200]")
        if self.micro_batch < 1 or self.accumulation_steps < 1:
            raise InvalidArgument("micro_batch and accumulation_steps must be >= 1")


@dataclass
class EarlyStopRecord:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0  # 1-indexed
    best: Classifier | None = None
    test_auroc: list = field(default_factory=list)
    train_indices: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.lr), start=1):
                w.writerow([i, *map(repr, row)])


def best_epoch(val_losses):
    """1-indexed epoch of the lowest validation loss, first one on ties."""
    if len(val_losses) == 0:
        raise InvalidArgument("no validation losses recorded")
    return int(np.argmin(np.asarray(val_losses))) + 1


def classification_objective(params, cfg, head, tokens, labels, pos_weight, buffers, updated=None):
    """Training-mode weighted BCE; new batch-norm statistics land in ``updated``."""
    feats = features_tensor(params, cfg, tokens)
    logits, new_buffers = head_forward(params, head, feats, True, buffers)
    if updated is not None:
        updated.update(new_buffers)
    return weighted_bce(logits, labels, pos_weight)


def classification_loss(clf: Classifier, volumes, labels, pos_weight, batch_size=16):
    """Mean weighted BCE in evaluation mode (no augmentation)."""
    z = clf.logits(volumes, batch_size).astype(np.float64)
    return float(weighted_bce(z, np.asarray(labels).reshape(z.shape), pos_weight).data)


def run_finetune(config: FinetuneConfig, train, val, test=None, encoder=None) -> EarlyStopRecord:
    """Fine-tune end to end and keep the lowest-validation-loss checkpoint.

    ``train``/``val``/``test`` are ``(volumes, labels)`` pairs.  ``encoder``
    holds pretrained weights; ``None`` trains from random initialisation.
    When ``test`` is given its mean AUROC is recorded after every epoch.
    """
    cfg = config.model
    train_vols, train_labels = train[0], np.asarray(train[1]).reshape(len(train[0]), -1)
    idx = subsample_labels(train_labels, config.label_fraction, config.seed)
    train_vols = [train_vols[i] for i in idx]
    train_labels = train_labels[idx]
    val_vols, val_labels = val[0], np.asarray(val[1]).reshape(len(val[0]), -1)
    weights = pos_weights(train_labels, config.pos_weight_direction)

    clf = new_classifier(cfg, config.head, encoder, config.seed)
    params, buffers = clf.params, clf.buffers
    adam = AdamState.for_params(params)
    record = EarlyStopRecord(train_indices=idx)
    best_val = np.inf
    step_size = config.micro_batch * config.accumulation_steps

    for epoch in range(config.max_epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_vols))
        chunks = [order[i:i + step_size] for i in range(0, len(order), step_size)]
        losses = []
        for step, chunk in enumerate(chunks):
            frac = epoch + step / len(chunks) if config.lr_granularity == "step" else epoch
            lr = lr_at(config.schedule, min(frac, config.schedule.total_epochs - 1))
            grads = []
            for j in range(0, len(chunk), config.micro_batch):
                micro = chunk[j:j + config.micro_batch]
                vols = [augment(train_vols[i], config.augmentation, [config.seed, epoch, int(i)]) for i in micro]
                updated = {}
                loss, g = value_and_grad(classification_objective, params, cfg, config.head,
                                         _tokens(cfg, vols), train_labels[micro], weights, buffers, updated)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {step}")
                buffers = updated
                losses.append(loss)
                grads.append(g)
            params, adam = adam_step(params, accumulate(grads), adam,
                                     param_lrs(params, lr, config.schedule.layer_decay, cfg.depth))
        current = Classifier(cfg, config.head, params, buffers)
        val_loss = classification_loss(current, val_vols, val_labels, weights)
        record.train_loss.append(float(np.mean(losses)))
        record.val_loss.append(val_loss)
        record.lr.append(lr)
        if test is not None:
            record.test_auroc.append(mean_auroc(current.predict(test[0]), test[1]))
        if val_loss < best_val:
            best_val = val_loss
            record.best_epoch = epoch + 1
            record.best = current
        log.info("epoch %d train %.4f val %.4f", epoch + 1, record.train_loss[-1], val_loss)
        if config.patience is not None and epoch + 1 - record.best_epoch >= config.patience:
            break
    return record


# ---------------------------------------------------------------------------
# frozen-embedding probe


@dataclass
class Probe:
    head: HeadConfig
    params: dict
    loss_history: list = field(default_factory=list)
    shift: np.ndarray | None = None  # per-feature standardisation fitted on the training rows
    scale: np.ndarray | None = None

    def _standardize(self, features):
        features = np.asarray(features, dtype=np.float32)
        if self.shift is None:
            return features
        return ((features - self.shift) / self.scale).astype(np.float32)

    def logits(self, features):
        f = ag.Tensor(self._standardize(features))
        return head_forward(_wrap(self.params), self.head, f)[0].data

    def predict(self, features):
        return ag._sigmoid(self.logits(features).astype(np.float64))


def _probe_objective(params, head, feats, labels, pos_weight):
    logits, _ = head_forward(params, head, ag.Tensor(feats), True, {})
    return weighted_bce(logits, labels, pos_weight)


def train_frozen_probe(features, labels, head: HeadConfig | None = None, seed=0, epochs=200,
                       lr=1e-3, batch_size=32, pos_weight_direction="neg_over_pos", standardize=True) -> Probe:
    """Train the [128, 32] probe on precomputed features; the encoder is never touched.

    With ``standardize`` each feature is z-scored using training-row
    statistics, which are stored on the probe and reused at prediction.
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels).reshape(len(features), -1)
    shift = scale = None
    if standardize:
        shift = features.mean(axis=0)
        scale = np.maximum(features.std(axis=0), 1e-6).astype(np.float32)
        features = ((features - shift) / scale).astype(np.float32)
    head = head or HeadConfig("ann_probe", labels.shape[1])
    params, _ = init_head(head, features.shape[1], seed)
    adam = AdamState.for_params(params)
    weights = pos_weights(labels, pos_weight_direction)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(features))
        epoch_losses = []
        for i in range(0, len(order), batch_size):
            b = order[i:i + batch_size]
            loss, g = value_and_grad(_probe_objective, params, head, features[b], labels[b], weights)
            params, adam = adam_step(params, g, adam, lr)
            epoch_losses.append(loss)
        history.append(float(np.mean(epoch_losses)))
    return Probe(head, params, history, shift, scale)


# ---------------------------------------------------------------------------
# feature cache


def write_feature_table(features, path) -> None:
    """Raw little-endian float32 rows plus a ``<path>.shape`` sidecar "rows cols"."""
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise InvalidArgument("feature table must be 2-D")
    Path(path).write_bytes(features.tobytes())
    Path(str(path) + ".shape").write_text(f"{features.shape[0]} {features.shape[1]}\n")


def read_feature_table(path) -> np.ndarray:
    rows, cols = (int(x) for x in Path(str(path) + ".shape").read_text().split())
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != rows * cols:
        raise InvalidArgument(f"{path}: expected {rows * cols} floats, found {data.size}")
    return data.reshape(rows, cols).astype(np.float32)


# ---------------------------------------------------------------------------
# persistence


def _pack(path, meta, arrays):
    blob = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    blob.update({k: np.asarray(v, dtype="<f4") for k, v in arrays.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **blob)


def _unpack(path, kind):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            arrays = {k: z[k].astype(np.float32) for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError) as e:
        raise FormatError(f"{path}: not a {kind} file ({e})") from None
    if meta.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} file, found {meta.get('kind')!r}")
    return meta, arrays


def save_classifier(clf: Classifier, path) -> None:
    """``.npz`` with the parameters, ``buffer/``-prefixed batch-norm state and a JSON header."""
    meta = {"kind": "classifier", "model": clf.cfg.to_dict(), "head": dataclasses.asdict(clf.head)}
    arrays = dict(clf.params)
    arrays.update({f"buffer/{k}": v for k, v in clf.buffers.items()})
    _pack(path, meta, arrays)


def load_classifier(path) -> Classifier:
    meta, arrays = _unpack(path, "classifier")
    params = {k: v for k, v in arrays.items() if not k.startswith("buffer/")}
    buffers = {k[len("buffer/"):]: v for k, v in arrays.items() if k.startswith("buffer/")}
    return Classifier(M.ModelConfig.from_dict(meta["model"]), HeadConfig(**meta["head"]), params, buffers)


def save_probe(probe: Probe, path) -> None:
    meta = {"kind": "probe", "head": dataclasses.asdict(probe.head), "loss_history": probe.loss_history}
    arrays = dict(probe.params)
    if probe.shift is not None:
        arrays["standardize/shift"] = probe.shift
        arrays["standardize/scale"] = probe.scale
    _pack(path, meta, arrays)


def load_probe(path) -> Probe:
    meta, arrays = _unpack(path, "probe")
    shift = arrays.pop("standardize/shift", None)
    scale = arrays.pop("standardize/scale", None)
    return Probe(HeadConfig(**meta["head"]), arrays, meta["loss_history"], shift, scale)
