from pathlib import Path

import pytest
import yaml

from dqpope.experiments import parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def shipped_config(name, **overrides):
    """Parse one of the shipped YAML configs with top-level keys replaced."""
    raw = yaml.safe_load((CONFIGS / name).read_text())
    raw.update(overrides)
    return parse_config(raw)


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    monkeypatch.delenv("DQPOPE_OUTPUT_DIR", raising=False)
    return tmp_path
