import json

import pytest

from wxalign.config import ConfigError, RunConfig, load_config


def test_defaults():
    cfg = RunConfig()
    assert cfg.dataset.train_count == 500 and cfg.dataset.test_count == 100
    assert cfg.align.lam == 0.001
    assert cfg.eval.iou == 0.5 and cfg.eval.nms == 0.45
    tc = cfg.train_config()
    assert tc.epochs == 60 and tc.align_epochs == 10 and tc.align_lr == pytest.approx(0.0002)
    assert cfg.train_config(lam=0.0).lam == 0.0


def test_json_round_trip():
    cfg = RunConfig.from_dict({"align": {"lambda": 0.0, "kind": "lowlight"}, "seeds": {"master": 11}})
    assert cfg.align.lam == 0.0
    back = RunConfig.from_json(cfg.to_json())
    assert back == cfg
    assert "lambda" in json.loads(cfg.to_json())["align"]


def test_load_config(tmp_path):
    assert load_config() == RunConfig()
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"epochs": 3}}))
    assert load_config(p).train.epochs == 3


def test_int_accepted_for_float():
    assert RunConfig.from_dict({"train": {"lr": 1}}).train.lr == 1.0


@pytest.mark.parametrize(
    "doc",
    [
        {"training": {}},
        {"train": {"epoch": 3}},
        {"align": {"lam": 0.1}},
        {"train": {"epochs": 2.5}},
        {"train": {"epochs": True}},
        {"train": {"lr": "fast"}},
        {"model": {"anchor": [0.3]}},
        {"model": {"embedding": "max"}},
        {"model": {"projector_dim": 128}},
        {"align": {"kind": "rain"}},
        {"align": {"lambda": -1.0}},
        {"align": {"batch_size": 1}},
        {"dataset": {"rows": 64, "cols": 32}},
        {"dataset": {"train_count": 0}},
        {"dataset": {"max_objects": 9}},
        {"seeds": {"master": -1}},
        {"train": []},
        [],
    ],
)
def test_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_rejects_invalid_json():
    with pytest.raises(ConfigError):
        RunConfig.from_json("{not json")


def test_custom_backbone_must_match_rows():
    bb = {"input_size": 32, "layers": [{"kind": "conv", "k": 3, "in_ch": 3, "out_ch": 8, "stride": 2, "pad": 1}]}
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"backbone": bb, "projector_dim": 8}})
    cfg = RunConfig.from_dict(
        {"dataset": {"rows": 32, "cols": 32}, "model": {"backbone": bb, "projector_dim": 8}}
    )
    assert cfg.model_config().backbone.output_shape() == (16, 16, 8)


def test_with_seed():
    assert RunConfig().with_seed(99).seeds.master == 99
