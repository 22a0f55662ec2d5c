import json

import pytest

from ebm_pretrain import corruptions as cx
from ebm_pretrain.config import RunConfig, apply_overrides, from_dict, load_config, parse_override
from ebm_pretrain.data import FolderDataset, SyntheticDataset
from ebm_pretrain.errors import ConfigError
from ebm_pretrain.models import ViTConfig


class TestRoundTrip:
    def test_defaults(self):
        cfg = RunConfig()
        assert from_dict(json.loads(cfg.to_json())) == cfg
        assert cfg.to_dict()["sampler"]["N"] == 2
        assert cfg.trainer.beta2 == 0.95 and cfg.trainer.weight_decay == 0.05

    def test_non_default_sections(self):
        cfg = RunConfig(
            model=ViTConfig(image_size=16, patch_size=8, embed_dim=32, depth=1, heads=2),
            corruption=cx.Mixed(((cx.RANDOM_LARGE, 0.5), (cx.SuperRes(2), 0.5))),
            dataset=FolderDataset("imgs", image_size=16),
            seed=7,
        )
        assert from_dict(cfg.to_dict()) == cfg

    def test_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"sampler": {"N": 3}, "trainer": {"epochs": 4}}))
        cfg = load_config(p)
        assert cfg.sampler.steps == 3 and cfg.trainer.epochs == 4


class TestOverrides:
    def test_set_overrides_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"sampler": {"N": 2}}))
        assert load_config(p, ["sampler.N=1"]).sampler.steps == 1

    def test_value_parsing(self):
        assert parse_override("a.b=1") == (["a", "b"], 1)
        assert parse_override("a=0.5") == (["a"], 0.5)
        assert parse_override("a=true") == (["a"], True)
        assert parse_override("a=runs/x") == (["a"], "runs/x")
        assert parse_override('corruption={"kind": "grayscale"}')[1] == {"kind": "grayscale"}

    def test_creates_sections(self):
        raw = apply_overrides({}, ["trainer.batch_size=8", "seed=3"])
        assert raw == {"trainer": {"batch_size": 8}, "seed": 3}

    @pytest.mark.parametrize("text", ["novalue", "a..b=1", "=3"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            apply_overrides({}, [text])

    def test_into_scalar(self):
        with pytest.raises(ConfigError):
            apply_overrides({"seed": 1}, ["seed.x=2"])


class TestStrictness:
    @pytest.mark.parametrize("raw,needle", [
        ({"modle": {}}, "modle"),
        ({"model": {"depht": 2}}, "model.depht"),
        ({"sampler": {"steps": 2}}, "sampler.steps"),
        ({"trainer": {"epochs": "ten"}}, "trainer.epochs"),
        ({"trainer": {"epochs": 2.5}}, "trainer.epochs"),
        ({"trainer": {"augment": 1}}, "trainer.augment"),
        ({"sampler": {"N": 0}}, "sampler"),
        ({"corruption": {"kind": "blur"}}, "corruption"),
        ({"dataset": {"kind": "folder"}}, "dataset.root"),
        ({"dataset": {"kind": "web"}}, "dataset.kind"),
        ({"model": {"image_size": 16, "patch_size": 4}}, "image_size"),
        ({"heldout_fraction": 1.0}, "heldout_fraction"),
        ({"sort": {"edge_k_probs": {"x": 1.0}}}, "sort.edge_k_probs"),
    ])
    def test_errors_name_the_key(self, raw, needle):
        with pytest.raises(ConfigError) as info:
            from_dict(raw)
        assert needle in str(info.value)

    def test_json_error_reports_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "seed": 1,\n  "model": {\n}}}\n')
        with pytest.raises(ConfigError) as info:
            load_config(p)
        assert "line 4" in str(info.value)

    def test_int_accepted_for_float(self):
        assert from_dict({"trainer": {"base_lr": 1}}).trainer.base_lr == 1.0

    def test_matching_image_sizes(self):
        cfg = from_dict({"model": {"image_size": 16}, "dataset": {"image_size": 16}})
        assert cfg.dataset == SyntheticDataset(image_size=16)
