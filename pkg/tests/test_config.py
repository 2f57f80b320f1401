"""Run configuration parsing, defaults, round trips and builders."""

import pytest

from voxmae.config import SCHEMA, ConfigError, RunConfig
from voxmae.errors import InvalidArgument


def test_defaults():
    c = RunConfig()
    assert c["model"]["patch_size"] == 16 and c["model"]["input_dims"] == (256, 256, 256)
    assert c["pretrain"]["base_lr"] == 1e-4 and c["pretrain"]["total_epochs"] == 400
    assert c["finetune"]["layer_decay"] == 0.75 and c["finetune"]["patience"] == 20
    assert c["eval"]["tta_n"] == 50


def test_parse_overrides_and_types():
    c = RunConfig.parse("""
# tiny run
[model]
input_dims = 32,32,32
patch_size = 8
embed_dim = 48
[finetune]
layer_decay = none
stratify = false
split = 0.6,0.2,0.2
""")
    assert c["model"]["input_dims"] == (32, 32, 32)
    assert c["finetune"]["layer_decay"] is None and c["finetune"]["stratify"] is False
    assert c["finetune"]["split"] == (0.6, 0.2, 0.2)
    assert c["model"]["depth"] == 24


def test_serialize_round_trip():
    c = RunConfig({"model": {"embed_dim": 48}, "pretrain": {"base_lr": 2e-3}, "finetune": {"patience": None}})
    back = RunConfig.parse(c.serialize())
    assert back == c and back.hash() == c.hash()
    assert c.hash() != RunConfig().hash()
    for section in SCHEMA:
        assert f"[{section}]" in c.serialize()


@pytest.mark.parametrize("text", [
    "[model]\nwidth = 3\n",
    "[optimizer]\nlr = 1\n",
    "[model]\npatch_size = eight\n",
    "[finetune]\nstratify = maybe\n",
    "not a config",
])
def test_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        RunConfig.parse(text)
    assert issubclass(ConfigError, InvalidArgument)


def test_set_validates():
    c = RunConfig()
    with pytest.raises(ConfigError):
        c.set("model", "nope", 1)


def test_builders():
    c = RunConfig({"model": {"input_dims": (32, 32, 32), "patch_size": 8, "embed_dim": 48, "depth": 2, "heads": 4,
                             "decoder_dim": 24, "decoder_depth": 1, "decoder_heads": 2},
                   "finetune": {"max_epochs": 30, "warmup_epochs": 2, "head": "mlp64"},
                   "synth": {"class_count": 2, "dims": (32, 32, 32), "lesion_radius_range": (2.0, 4.0)}})
    mc = c.model_config()
    assert mc.n_tokens == 64
    pc = c.pretrain_config(seed=3)
    assert pc.seed == 3 and pc.schedule.total_epochs == 400 and pc.model == mc
    fc = c.finetune_config(class_count=2)
    assert fc.head.kind == "mlp64" and fc.head.class_count == 2 and fc.schedule.total_epochs == 30
    assert fc.schedule.layer_decay == 0.75
    spec = c.synthetic_spec()
    assert spec.prevalence == (0.5, 0.5)
    assert c.augmentation().rotation_max_deg == 10.0


def test_load_from_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("[eval]\ntta_n = 7\n")
    assert RunConfig.load(p)["eval"]["tta_n"] == 7
