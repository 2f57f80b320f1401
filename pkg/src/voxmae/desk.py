"""Desk-scale reference protocol: the tiny model, corpora and schedules used
by the acceptance suite and the demo scripts.

Everything here is a fixed recipe built from the library's public pieces,
so that tests and demos agree on one set of numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import model as M
from .engine import ScheduleSpec
from .finetune import FinetuneConfig, HeadConfig
from .pretrain import PretrainConfig
from .volumes import SplitSpec, SyntheticSpec, generate_synthetic, split_dataset

PRETRAIN_SEED = 1  # corpus seed; disjoint from the lesion task corpus
TASK_SEED = 2


def model_config():
    return M.tiny_config()


def pretrain_config(seed=0, epochs=25) -> PretrainConfig:
    """25 epochs of 8 batches of 8 volumes: 200 optimizer steps on 64 volumes."""
    schedule = ScheduleSpec(base_lr=2e-3, warmup_epochs=1, total_epochs=epochs, final_lr=0.0, layer_decay=None)
    return PretrainConfig(model=model_config(), schedule=schedule, batch_size=8, seed=seed,
                          lr_granularity="step")


def pretrain_corpus(n_volumes=64):
    return generate_synthetic(SyntheticSpec(n_volumes=n_volumes, seed=PRETRAIN_SEED))


@dataclass
class LesionTask:
    volumes: list
    manifest: object
    masks: list
    split: SplitSpec

    def part(self, name):
        idx = self.split.indices(name)
        labels = self.manifest.labels
        return [self.volumes[i] for i in idx], labels[idx]

    def masks_of(self, name):
        return [self.masks[i] for i in self.split.indices(name)]


def lesion_task(n_volumes=200) -> LesionTask:
    """Binary lesion-detection corpus split 50:10:40 by subject."""
    vols, manifest, masks = generate_synthetic(SyntheticSpec(n_volumes=n_volumes, seed=TASK_SEED), return_masks=True)
    split = split_dataset(manifest, SplitSpec((0.5, 0.1, 0.4), seed=0))
    return LesionTask(vols, manifest, masks, split)


def finetune_config(seed=0, label_fraction=1.0, epochs=30, head="linear") -> FinetuneConfig:
    """Warmup + cosine over ``epochs``, layer decay 0.75, effective batch 12, updated per step."""
    schedule = ScheduleSpec(base_lr=3e-3, warmup_epochs=2, total_epochs=epochs, final_lr=1e-6, layer_decay=0.75)
    return FinetuneConfig(model=model_config(), head=HeadConfig(head, 1), schedule=schedule,
                          label_fraction=label_fraction, max_epochs=epochs, patience=None,
                          micro_batch=12, accumulation_steps=1, seed=seed, lr_granularity="step")
