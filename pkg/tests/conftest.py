import numpy as np
import pytest

from huclab import CorpusConfig, gen_corpus
from huclab.pipeline import build_config


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small fixed corpus shared by read-only tests."""
    return gen_corpus(
        CorpusConfig(
            num_speakers=2,
            num_phonemes=3,
            utterances_per_speaker=6,
            phones_per_utterance=8,
            frames_per_phone=2,
            samples_per_frame=24,
            speaker_strength=1.0,
            noise_std=0.05,
            seed=11,
        )
    )


def fast_config_dict(**overrides):
    """A quick pipeline config for integration tests (seconds, not minutes)."""
    raw = {
        "seed": 0,
        "corpus": {
            "num_speakers": 3,
            "num_phonemes": 4,
            "utterances_per_speaker": 4,
            "phones_per_utterance": 6,
            "frames_per_phone": 2,
            "samples_per_frame": 24,
            "speaker_strength": 2.0,
            "noise_std": 0.05,
        },
        "arch": {
            "conv_layers": [[4, 4, 8], [3, 3, 10], [2, 2, 12]],
            "recurrent_layers": 1,
            "hidden_dim": 12,
        },
        "cpc": {"future_steps": 3, "num_negatives": 6},
        "train": {"epochs": 3, "learning_rate": 0.01, "batch_size": 4},
        "k": 5,
        "sampling": {"mode": "farthest", "n_select": 2, "m_grid": [2, 3, 4, 6]},
        "d": 8,
        "gbdt": {"rounds": 5, "max_depth": 3},
        "eval": {"abx_triplets": 40, "bootstrap_resamples": 50},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return raw


@pytest.fixture()
def fast_config():
    return build_config(fast_config_dict())
