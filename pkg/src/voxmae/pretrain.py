"""Masked-autoencoder pretraining loop, checkpoints and reconstruction previews."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .engine import AdamState, ScheduleSpec, accumulate, adam_step, lr_at, value_and_grad
from .errors import FormatError, InvalidArgument, NumericError
from .volumes import AugmentationSpec, DatasetManifest, Volume, augment, subsample_indices

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec.pretrain)
    corpus_fraction: float = 1.0
    stratify_by_source: bool = True
    batch_size: int = 1
    accumulation_steps: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    masked_only: bool = True
    lr_granularity: str = "epoch"  # or "step"
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec.pretrain)

    def __post_init__(self):
        if not 0.0 < self.corpus_fraction <= 1.0:
            raise InvalidArgument("corpus_fraction must be in (0, 1]")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise InvalidArgument("batch_size and accumulation_steps must be >= 1")
        if self.lr_granularity not in ("epoch", "step"):
            raise InvalidArgument(f"unknown lr granularity {self.lr_granularity!r}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def hash(self):
        d = self.to_dict()
        for k in ("checkpoint_dir", "checkpoint_every"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    config_hash: str
    epoch: int
    params: dict
    adam: AdamState
    rng_state: dict
    loss_history: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    model: M.ModelConfig | None = None


def subsample_corpus(m: DatasetManifest, fraction, seed, stratify_by_source=True) -> DatasetManifest:
    """Seeded subset of a pretraining corpus, stratified by record source."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgument(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return m.subset(range(len(m)))
    groups = [r.source for r in m.records] if stratify_by_source else [""] * len(m)
    idx = subsample_indices(np.zeros((len(m), 1)), fraction, seed, groups=groups)
    if not idx:
        raise InvalidArgument(f"fraction {fraction} leaves no records out of {len(m)}")
    return m.subset(idx)


def _batches(order, size):
    return [order[i:i + size] for i in range(0, len(order), size)]


def _mae_objective(params, cfg, tokens, plans, masked_only):
    recon = M.decode(params, cfg, M.encode(params, cfg, tokens, plans))
    return M.mae_loss(recon, tokens, plans, masked_only)


def pretrain_epoch(state: Checkpoint, config: PretrainConfig, volumes):
    """Run one pass over ``volumes``; returns ``(state, mean_loss)``.

    Randomness is keyed by (seed, epoch, record), so a resumed run draws
    exactly the same flips, masks and ordering as an uninterrupted one.
    """
    cfg = config.model
    epoch = state.epoch
    order = np.random.default_rng([config.seed, epoch]).permutation(len(volumes))
    steps = _batches(list(order), config.batch_size * config.accumulation_steps)
    params, adam = state.params, state.adam
    losses = []
    lr = 0.0
    for step, chunk in enumerate(steps):
        if config.lr_granularity == "step":
            lr = lr_at(config.schedule, epoch + step / len(steps))
        else:
            lr = lr_at(config.schedule, epoch)
        grads = []
        for micro in _batches(chunk, config.batch_size):
            vox = np.stack([augment(volumes[r], config.augmentation, [config.seed, epoch, int(r), 0]).voxels
                            for r in micro])
            tokens = M.patchify_array(vox, cfg.patch_size)
            plans = [M.random_mask(cfg.n_tokens, cfg.mask_ratio, [config.seed, epoch, int(r), 1]) for r in micro]
            loss, g = value_and_grad(_mae_objective, params, cfg, tokens, plans, config.masked_only)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {step}")
            losses.append(loss)
            grads.append(g)
        params, adam = adam_step(params, accumulate(grads), adam, lr)
    mean_loss = float(np.mean(losses))
    new_state = dataclasses.replace(
        state, params=params, adam=adam, epoch=epoch + 1,
        loss_history=state.loss_history + [mean_loss],
        lr_history=state.lr_history + [lr],
        step_losses=state.step_losses + losses,
        rng_state={"seed": config.seed, "epoch": epoch + 1})
    return new_state, mean_loss


def initial_state(config: PretrainConfig) -> Checkpoint:
    params = M.init_params(config.model, config.seed)
    return Checkpoint(config.hash(), 0, params, AdamState.for_params(params),
                      {"seed": config.seed, "epoch": 0}, model=config.model)


def run_pretraining(config: PretrainConfig, volumes, manifest: DatasetManifest | None = None,
                    resume: Checkpoint | None = None, epochs: int | None = None) -> Checkpoint:
    """Pretrain on ``volumes`` (aligned with ``manifest`` when given).

    ``epochs`` caps the number of epochs run in this call (the schedule
    still spans ``schedule.total_epochs``); ``resume`` continues from a
    checkpoint.
    """
    volumes = list(volumes)
    if manifest is not None and config.corpus_fraction < 1.0:
        sub = subsample_corpus(manifest, config.corpus_fraction, config.seed, config.stratify_by_source)
        keep = {r.path for r in sub.records}
        volumes = [v for v, r in zip(volumes, manifest.records) if r.path in keep]
    elif config.corpus_fraction < 1.0:
        idx = subsample_indices(np.zeros((len(volumes), 1)), config.corpus_fraction, config.seed)
        volumes = [volumes[i] for i in idx]
    if not volumes:
        raise InvalidArgument("empty pretraining corpus")
    for v in volumes:
        if v.dims != config.model.input_dims:
            raise InvalidArgument(f"volume dims {v.dims} do not match model {config.model.input_dims}")

    state = resume if resume is not None else initial_state(config)
    if state.config_hash != config.hash():
        raise InvalidArgument("checkpoint was produced by a different configuration")
    end = config.schedule.total_epochs if epochs is None else min(config.schedule.total_epochs, state.epoch + epochs)
    while state.epoch < end:
        state, loss = pretrain_epoch(state, config, volumes)
        log.info("epoch %d loss %.6f lr %.3g", state.epoch, loss, state.lr_history[-1])
        if config.checkpoint_dir and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
            save_checkpoint(state, Path(config.checkpoint_dir) / f"epoch_{state.epoch:04d}.ckpt")
    return state


# ---------------------------------------------------------------------------
# checkpoint files

_CKPT_MAGIC = b"VCKP"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Named float32 arrays behind a JSON header listing names and shapes."""
    arrays = [(f"params/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"adam_m/{k}", v) for k, v in ckpt.adam.m.items()]
    arrays += [(f"adam_v/{k}", v) for k, v in ckpt.adam.v.items()]
    index, offset = [], 0
    for name, arr in arrays:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += 4 * arr.size
    header = {
        "version": 1,
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "loss_history": ckpt.loss_history,
        "lr_history": ckpt.lr_history,
        "step_losses": ckpt.step_losses,
        "adam": {"t": ckpt.adam.t, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "model": ckpt.model.to_dict() if ckpt.model else None,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, expected_hash=None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + n])
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise InvalidArgument(f"{path}: config hash {header['config_hash']} != expected {expected_hash}")
    base = 8 + n
    groups = {"params": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["arrays"]:
        kind, name = entry["name"].split("/", 1)
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).astype(np.float32)
        groups[kind][name] = arr.reshape(entry["shape"])
    a = header["adam"]
    adam = AdamState(groups["adam_m"], groups["adam_v"], a["t"], a["beta1"], a["beta2"], a["eps"])
    model = M.ModelConfig.from_dict(header["model"]) if header.get("model") else None
    return Checkpoint(header["config_hash"], header["epoch"], groups["params"], adam,
                      header["rng_state"], header["loss_history"], header["lr_history"],
                      header.get("step_losses", []), model)


def write_loss_csv(ckpt: Checkpoint, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr"])
        for i, (loss, lr) in enumerate(zip(ckpt.loss_history, ckpt.lr_history), start=1):
            w.writerow([i, repr(loss), repr(lr)])


# ---------------------------------------------------------------------------
# previews


def reconstruct_preview(params, cfg: M.ModelConfig, v: Volume, rng_seed):
    """Return ``(masked, reconstruction, plan)`` for one input.

    Masked patches are zeroed in the first; in the second, visible patches
    are copied from the input and masked ones come from the decoder.
    """
    if isinstance(params, Checkpoint):
        cfg = params.model or cfg
        params = params.params
    if v.dims != cfg.input_dims:
        raise InvalidArgument(f"volume dims {v.dims} do not match model {cfg.input_dims}")
    seq = M.patchify(v, cfg.patch_size)
    plan = M.random_mask(cfg.n_tokens, cfg.mask_ratio, rng_seed)
    recon = M.reconstruct(params, cfg, seq.tokens[None].astype(np.float32), [plan])[0]
    visible = plan.visible_flags[:, None]
    masked_tokens = np.where(visible, seq.tokens, 0.0).astype(np.float32)
    merged = np.where(visible, seq.tokens, recon).astype(np.float32)
    masked = M.unpatchify(M.PatchSequence(masked_tokens, seq.grid, v.spacing))
    full = M.unpatchify(M.PatchSequence(merged, seq.grid, v.spacing))
    return masked, full, plan
