import pytest

from uniflow.config import RunConfig, load_config, parse_config
from uniflow.tasks import ConfigError

GOOD = """
model:
  depth: 2
  embed_size: 32
  fusion_mode: double
train:
  steps: 10
  learning_rate: 3e-4
  balanced: false
tasks:
  weights: {nta_events: 3}
inference:
  guidance_scale: 2
  n_samples: 4
"""


def test_full_config_parses():
    cfg = parse_config(GOOD)
    assert cfg.model.depth == 2 and cfg.model.fusion_mode == "double"
    assert cfg.train.learning_rate == 3e-4 and cfg.train.balanced is False
    assert cfg.inference.guidance_scale == 2.0 and cfg.inference.n_samples == 4
    assert [t.sampling_weight for t in cfg.registry().tasks] == [1, 1, 3]


def test_empty_config_is_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.train.steps == 3000 and cfg.model.depth == 4 and cfg.model.embed_size == 64


@pytest.mark.parametrize(
    "text, where, what",
    [
        ("model:\n  depht: 3\n", ":2:3", "depht"),
        ("optim:\n  lr: 1\n", ":1:1", "optim"),
        ("train:\n  steps: many\n", ":2:10", "steps"),
        ("train:\n  steps: 1\n  steps: 2\n", ":3:3", "duplicate"),
        ("tasks:\n  weights: {tts: 2}\n", "", "tts"),
        ("model:\n  embed_size: 30\n  num_heads: 4\n", ":2:3", "divisible"),
        ("model: [1, 2]\n", ":1:8", "mapping"),
        ("train: {steps: 1\n", ":", ""),
    ],
)
def test_config_errors_carry_location(text, where, what):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "run.yaml")
    msg = str(info.value)
    assert msg.startswith("run.yaml") and where in msg and what in msg


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nope.yaml"):
        load_config(tmp_path / "nope.yaml")
