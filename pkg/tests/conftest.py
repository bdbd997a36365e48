import logging
import os

import numpy as np
import pytest

from parpiano.codec import decode
from parpiano.config import ModelConfig, SynthSpec, TrainConfig, tiny_config
from parpiano.dsp import log_mel_matrix
from parpiano.models import FPS, N_STATES, NoteState
from parpiano.network import ParModel
from parpiano.synth import write_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs, enabled with PARPIANO_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("PARPIANO_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set PARPIANO_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def small_par_config(**overrides) -> ModelConfig:
    fields = dict(
        variant="PAR",
        conv_channels=2,
        fc_units=16,
        hidden_per_pitch=4,
        lstm_units=6,
        lstm_layers=1,
        film_hidden=4,
        context_hidden=4,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def random_mel(n_frames: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(-5.0, 2.0, size=(700, n_frames))


def force_state(model: ParModel, state: NoteState) -> ParModel:
    """Make the note head predict one state regardless of its input."""
    head = model.note_seq.head
    head.weight.data[...] = 0.0
    head.bias.data[...] = 0.0
    head.bias.data[int(state)] = 20.0
    return model


def mixed_state_model(audio: np.ndarray, dtype=np.float64, tries: int = 40) -> ParModel:
    """A random tiny model whose decode of ``audio`` visits at least three states
    and holds some note for more than one frame."""
    mel = log_mel_matrix(audio)
    for seed in range(tries):
        model = ParModel(tiny_config(seed=seed), dtype=dtype)
        for name, param in model.named_parameters():
            if name.startswith(("note_seq.", "context.")):
                param.data *= 4.0
        model.note_seq.head.bias.data[...] = 0.0
        full = model.decode_offline(mel)
        histogram = np.bincount(full.states.ravel(), minlength=N_STATES)
        notes = decode(full.states, full.velocity)
        if (histogram > 0).sum() >= 3 and any(n.offset - n.onset > 1.5 / FPS for n in notes):
            return model
    raise RuntimeError(f"no seed below {tries} gives a model with mixed note states")


@pytest.fixture(scope="session")
def tiny_model():
    return ParModel(tiny_config())


@pytest.fixture(scope="session")
def tiny_model64():
    return ParModel(tiny_config(), dtype=np.float64)


@pytest.fixture(scope="session")
def par_model64():
    return ParModel(small_par_config(), dtype=np.float64)


@pytest.fixture
def silent_model():
    return force_state(ParModel(tiny_config()), NoteState.OFF)


@pytest.fixture(scope="session")
def synth_spec():
    return SynthSpec(
        seed=3,
        n_pieces=4,
        piece_seconds=2.0,
        note_rate=3.0,
        valid_fraction=0.25,
        test_fraction=0.25,
        pedal_prob=0.5,
    )


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, synth_spec):
    out = tmp_path_factory.mktemp("synth")
    write_dataset(synth_spec, str(out))
    return str(out)


@pytest.fixture
def train_config(dataset_dir, tmp_path):
    return TrainConfig(
        dataset_dir=dataset_dir,
        output_dir=str(tmp_path / "run"),
        model=tiny_config(),
        crop_seconds=1.0,
        batch_size=2,
        max_iters=2,
        validate_every=1,
        max_valid_pieces=1,
    )


@pytest.fixture
def cli_logging():
    """Undo the handler the CLI installs on the package logger."""
    yield
    logger = logging.getLogger("parpiano")
    logger.handlers[:] = []
    logger.propagate = True
    logger.setLevel(logging.NOTSET)
