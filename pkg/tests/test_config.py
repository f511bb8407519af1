import pytest

from lmplab.config import RunConfig, load_config, set_value
from lmplab.errors import InvalidConfig, InvalidFractions


def test_defaults_valid_and_digest_stable():
    a, b = load_config(), load_config()
    assert a.digest() == b.digest()
    assert len(a.digest()) == 64


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[data]\nsplits = 0.6, 0.2, 0.2\n[transfer]\nseeds = 3,4\n[train]\nearly_stopping = no\n")
    cfg = load_config(path, [("data", "count", "40"), ("train", "lr", None)])
    assert cfg.data.splits == (0.6, 0.2, 0.2)
    assert cfg.transfer.seeds == (3, 4)
    assert cfg.train.early_stopping is False
    assert cfg.data.count == 40
    assert cfg.train.lr == RunConfig().train.lr


def test_digest_changes_with_values():
    cfg = RunConfig()
    before = cfg.digest()
    set_value(cfg, "train", "seed", "5")
    assert cfg.digest() != before


@pytest.mark.parametrize("section,key,value", [("model", "kind", "cnn"), ("transfer", "max_lines", "3"),
                                               ("transfer", "finetune_epochs", "0"),
                                               ("data", "splits", "0.5,0.5,0.5"), ("train", "early_stopping", "maybe")])
def test_invalid_values(section, key, value):
    with pytest.raises((InvalidConfig, InvalidFractions)):
        load_config(overrides=[(section, key, value)])


def test_model_dims_must_match_features():
    cfg = load_config(overrides=[("model", "dims", "3,8,1")])
    with pytest.raises(InvalidConfig):
        cfg.model.resolved_dims(4)
    assert load_config().model.resolved_dims(4) == (4, 32, 32, 1)
