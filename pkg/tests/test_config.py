import json

import pytest

from damamba import config as C
from damamba.errors import ConfigError


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = C.load(None)
    C.save(cfg, tmp_path / "c.json")
    assert C.to_dict(C.load(tmp_path / "c.json")) == C.to_dict(cfg)


def test_overrides_coerce_types():
    cfg = C.apply_overrides(C.Config(), ["model.partner_fusion=false", "lr=1e-3", "layers=2", "ccc_scope=window"])
    assert cfg.model.partner_fusion is False and cfg.train.lr == 1e-3 and cfg.model.layers == 2
    assert cfg.train.ccc_scope == "window"


@pytest.mark.parametrize(
    "item",
    ["seed=1", "model.nope=1", "nosection.x=1", "layers=2.5", "dropout=1.0", "partner_fusion=maybe", "window=64", "lambda_align=-1", "targets=some"],
)
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        C.apply_overrides(C.Config(), [item])


def test_ambiguous_key_lists_candidates():
    with pytest.raises(ConfigError, match="train.seed"):
        C.resolve_key("seed")
    assert C.resolve_key("data.seed") == ("data", "seed")


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        C.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        C.load(tmp_path / "bad.json")
    (tmp_path / "sec.json").write_text(json.dumps({"model": 3}))
    with pytest.raises(ConfigError):
        C.load(tmp_path / "sec.json")


def test_describe_covers_every_key():
    text = C.describe()
    for section in C.SECTIONS:
        for key in C._field_types(section):
            assert f"{section}.{key} = " in text
    assert "[published: 0.4]" in text


def test_synthetic_preset_only_changes_step_size():
    base, preset = C.to_dict(C.Config()), C.to_dict(C.synthetic_benchmark_config())
    diff = {(s, k) for s in base for k in base[s] if base[s][k] != preset[s][k]}
    assert diff == {("train", "lr"), ("train", "warmup_steps")}
