import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mixpgd.data import Alphabet, MelConfig, featurize_corpus, make_batch, synth_toy_corpus
from mixpgd.model import ModelConfig, SpeechRecognizer

TINY_MEL = MelConfig(mel_bins=16)
TINY_MODEL = ModelConfig(n_mels=16, cnn_channels=4, n_rescnn_blocks=1, n_birnn_layers=1,
                         rnn_hidden=16, conv_downsample_factor=2, dropout=0.1)


@pytest.fixture(scope="session")
def alphabet():
    return Alphabet()


@pytest.fixture(scope="session")
def tiny_corpus():
    return featurize_corpus(synth_toy_corpus(3, 6), TINY_MEL)


@pytest.fixture
def tiny_batch(tiny_corpus, alphabet):
    return make_batch(tiny_corpus[:4], alphabet)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    model = SpeechRecognizer(TINY_MODEL)
    model.eval()
    return model


# Lines printed by the acceptance suite, echoed once more at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
