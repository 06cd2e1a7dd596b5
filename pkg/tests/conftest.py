import numpy as np
import pytest

from salient import audio, corpus, model


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small synthetic corpus shared by corpus/trainer/inference tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = corpus.synth_corpus(root, n_utterances=10, seed=123)
    return manifest


@pytest.fixture(scope="session")
def fb():
    return audio.default_filterbank()


@pytest.fixture()
def tiny_model_config():
    # small enough for fast gradient work, same topology as the desk preset
    return model.EncoderConfig(lstm_layers=2, fc_layers=1, hidden=10, feature_dim=4, input_dim=14)


def make_sine(freq_hz: float, seconds: float = 1.0, amplitude: float = 1.0) -> audio.AudioBuffer:
    t = np.arange(int(seconds * audio.SAMPLE_RATE)) / audio.SAMPLE_RATE
    return audio.AudioBuffer((amplitude * np.sin(2 * np.pi * freq_hz * t)).astype(np.float32))
