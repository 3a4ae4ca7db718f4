import sys
from pathlib import Path

import pytest
from hypothesis import settings

from vecmap.config import ExperimentConfig

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=100, deadline=None)
settings.load_profile("default")


def tiny_config(**sections) -> ExperimentConfig:
    """A model and dataset small enough for unit tests."""
    base = {
        "scene": {"num_frames": 6},
        "data": {"num_train": 3, "num_val": 2},
        "querygen": {"embed_dim": 16, "num_instance_queries": 6, "k_prev": 4},
        "decoder": {"num_layers": 3, "num_heads": 2, "ffn_dim": 32, "num_groups": 2,
                    "encoder_channels": [8, 16]},
        "optim": {"epochs": 1, "batch_size": 4, "warmup_steps": 2},
    }
    cfg = ExperimentConfig.from_dict(base)
    if sections:
        from vecmap.config import replace

        cfg = replace(cfg, **sections)
    return cfg.validate()


@pytest.fixture
def tiny():
    return tiny_config()
