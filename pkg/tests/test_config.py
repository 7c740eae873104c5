import pytest

from antidiff.config import ConfigError, RunConfig, from_ini, to_ini


def test_ini_round_trip_defaults():
    cfg = RunConfig()
    assert from_ini(to_ini(cfg)) == cfg


def test_ini_overrides_are_typed():
    text = """
[protect]
epochs = 3
prompt_tuning = no
attention_layers = mid.attn
[budget]
eta = 0.03
[edit]
target_shape = ring
"""
    cfg = from_ini(text)
    assert cfg.protect.epochs == 3 and cfg.protect.prompt_tuning is False
    assert cfg.protect.attention_layers == ("mid.attn",)
    assert cfg.protect.budget.eta == 0.03
    assert cfg.edit.target_shape == "ring"
    assert from_ini(to_ini(cfg)) == cfg
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "text",
    [
        "[protect]\nepochz = 3\n",
        "[nonsense]\na = 1\n",
        "[budget]\neta = lots\n",
        "[budget]\neta = 2.0\n",
        "[protect]\nprompt_tuning = maybe\n",
        "no section header\n",
        "[protect]\nprompt = x\n",
    ],
)
def test_bad_config_raises(text):
    with pytest.raises(ConfigError):
        from_ini(text)
