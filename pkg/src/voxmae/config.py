"""Flat ``key = value`` run configuration with a fixed, documented schema."""

from __future__ import annotations

import configparser
import hashlib

from .engine import ScheduleSpec
from .errors import InvalidArgument
from .finetune import FinetuneConfig, HeadConfig
from .model import ModelConfig
from .pretrain import PretrainConfig
from .volumes import AugmentationSpec, SyntheticSpec


class ConfigError(InvalidArgument):
    pass


def _ints(text):
    return tuple(int(x) for x in text.split(","))


def _floats(text):
    return tuple(float(x) for x in text.split(","))


def _bool(text):
    if text.lower() in ("true", "yes", "1"):
        return True
    if text.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.lower() == "none" else float(text)


def _opt_int(text):
    return None if text.lower() == "none" else int(text)


def _fmt(value):
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


# section -> key -> (parser, default)
SCHEMA = {
    "model": {
        "patch_size": (int, 16),
        "input_dims": (_ints, (256, 256, 256)),
        "embed_dim": (int, 1024),
        "depth": (int, 24),
        "heads": (int, 16),
        "mlp_ratio": (float, 4.0),
        "decoder_dim": (int, 512),
        "decoder_depth": (int, 8),
        "decoder_heads": (int, 16),
        "mask_ratio": (float, 0.75),
    },
    "pretrain": {
        "base_lr": (float, 1e-4),
        "warmup_epochs": (int, 20),
        "total_epochs": (int, 400),
        "final_lr": (float, 0.0),
        "batch_size": (int, 1),
        "accumulation_steps": (int, 1),
        "corpus_fraction": (float, 1.0),
        "stratify_by_source": (_bool, True),
        "seed": (int, 0),
        "checkpoint_every": (int, 0),
        "masked_only": (_bool, True),
        "lr_granularity": (str, "epoch"),
    },
    "finetune": {
        "head": (str, "linear"),
        "base_lr": (float, 1e-4),
        "warmup_epochs": (int, 10),
        "max_epochs": (int, 200),
        "final_lr": (float, 1e-6),
        "layer_decay": (_opt_float, 0.75),
        "label_fraction": (float, 1.0),
        "micro_batch": (int, 1),
        "accumulation_steps": (int, 12),
        "patience": (_opt_int, 20),
        "seed": (int, 0),
        "split": (_floats, (0.5, 0.1, 0.4)),
        "stratify": (_bool, True),
        "pos_weight_direction": (str, "neg_over_pos"),
        "lr_granularity": (str, "epoch"),
        "probe_epochs": (int, 200),
        "probe_lr": (float, 1e-3),
    },
    "eval": {
        "tta_n": (int, 50),
        "tta_preset": (str, "aggressive"),
        "entropy_mode": (str, "mean_of_entropies"),
        "t_test": (str, "welch"),
        "n_devices": (int, 4),
        "watts_per_device": (float, 300.0),
        "hours_per_epoch": (float, 1.5),
        "epochs": (int, 400),
        "kg_co2_per_kwh": (float, 0.4),
    },
    "augment": {
        "flip_prob": (_floats, (0.0, 0.0, 0.0)),
        "rotation_max_deg": (float, 10.0),
        "scale_range": (_floats, (0.9, 1.1)),
        "noise_sigma": (float, 0.01),
        "smooth_sigma_range": (_floats, (0.0, 1.0)),
        "contrast_gamma_range": (_floats, (0.8, 1.25)),
        "translation_max_voxels": (int, 4),
    },
    "synth": {
        "dims": (_ints, (32, 32, 32)),
        "n_volumes": (int, 64),
        "class_count": (int, 1),
        "lesion_radius_range": (_floats, (4.0, 7.0)),
        "lesion_intensity_delta": (float, 0.5),
        "background_texture_scale": (float, 0.03),
        "prevalence": (_floats, (0.5,)),
        "seed": (int, 0),
    },
}


class RunConfig:
    """Typed view of a run configuration; unset keys take documented defaults."""

    def __init__(self, values=None):
        self.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(section, key, value)

    def set(self, section, key, value):
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        self.values[section][key] = value

    def __getitem__(self, section):
        return self.values[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    @classmethod
    def parse(cls, text):
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config: {e}") from None
        cfg = cls()
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key '{key}' in section [{section}]")
                parser = SCHEMA[section][key][0]
                try:
                    cfg.values[section][key] = parser(raw.strip())
                except ValueError as e:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({e})") from None
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def serialize(self):
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_fmt(self.values[section][k])}" for k in keys)
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:16]

    # builders

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.values["model"])

    def augmentation(self) -> AugmentationSpec:
        return AugmentationSpec(**self.values["augment"])

    def synthetic_spec(self) -> SyntheticSpec:
        s = dict(self.values["synth"])
        if len(s["prevalence"]) == 1:
            s["prevalence"] = s["prevalence"] * s["class_count"]
        return SyntheticSpec(**s)

    def pretrain_config(self, **overrides) -> PretrainConfig:
        p = dict(self.values["pretrain"])
        schedule = ScheduleSpec(base_lr=p.pop("base_lr"), warmup_epochs=p.pop("warmup_epochs"),
                                total_epochs=p.pop("total_epochs"), final_lr=p.pop("final_lr"),
                                layer_decay=None)
        p.update(overrides)
        return PretrainConfig(model=self.model_config(), schedule=schedule, **p)

    def finetune_config(self, class_count=1, **overrides) -> FinetuneConfig:
        f = dict(self.values["finetune"])
        schedule = ScheduleSpec(base_lr=f["base_lr"], warmup_epochs=f["warmup_epochs"],
                                total_epochs=f["max_epochs"], final_lr=f["final_lr"],
                                layer_decay=f["layer_decay"])
        kw = dict(model=self.model_config(), head=HeadConfig(f["head"], class_count), schedule=schedule,
                  label_fraction=f["label_fraction"], augmentation=self.augmentation(),
                  max_epochs=f["max_epochs"], patience=f["patience"], micro_batch=f["micro_batch"],
                  accumulation_steps=f["accumulation_steps"], seed=f["seed"],
                  pos_weight_direction=f["pos_weight_direction"], lr_granularity=f["lr_granularity"])
        kw.update(overrides)
        return FinetuneConfig(**kw)
