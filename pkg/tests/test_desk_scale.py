"""Desk-scale learning runs. Minutes of CPU each; enabled with PARPIANO_SLOW=1."""
import os
import warnings

import numpy as np
import pandas as pd
import pytest

from parpiano import cli
from parpiano.checkpoint import save_checkpoint
from parpiano.config import SynthSpec, TrainConfig, tiny_config
from parpiano.files import read_notes
from parpiano.metrics import breakdown, compute_metrics, macro_average
from parpiano.models import FPS, MAX_MIDI, MIN_MIDI
from parpiano.synth import write_dataset
from parpiano.trainer import Trainer, evaluate_model, load_split, transcribe_piece

pytestmark = pytest.mark.slow

DESK_RUN = dict(crop_seconds=5.0, batch_size=4, max_iters=1500, validate_every=250, max_valid_pieces=3, lr=1e-3)


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("desk"))
    write_dataset(SynthSpec(seed=0, n_pieces=50, piece_seconds=10.0, max_polyphony=3), out)
    return {
        "dir": out,
        "train": load_split(out, "train"),
        "valid": load_split(out, "valid", DESK_RUN["max_valid_pieces"]),
        "test": load_split(out, "test"),
    }


@pytest.fixture(scope="module")
def trained(desk_data, tmp_path_factory):
    cache = {}

    def get(ablation=None):
        if ablation not in cache:
            model = tiny_config() if ablation is None else tiny_config().with_ablation(ablation)
            config = TrainConfig(
                dataset_dir=desk_data["dir"],
                output_dir=str(tmp_path_factory.mktemp(ablation or "full")),
                model=model,
                **DESK_RUN,
            )
            trainer = Trainer(config, progress=False)
            trainer.fit(desk_data["train"], desk_data["valid"])
            cache[ablation] = trainer.best_model()
        return cache[ablation]

    return get


def _octave_gap(model, pieces) -> float:
    ref, est = [], []
    offset = 0.0
    for piece in pieces:
        ref += [n.model_copy(update={"onset": n.onset + offset, "offset": n.offset + offset}) for n in piece.notes]
        est += [
            n.model_copy(update={"onset": n.onset + offset, "offset": n.offset + offset})
            for n in transcribe_piece(model, piece)
        ]
        offset += piece.n_frames / FPS + 10.0
    frame = breakdown(ref, est, axis="pitch")
    bottom = frame[frame["lo"] < MIN_MIDI + 12]
    top = frame[frame["lo"] > MAX_MIDI - 12]

    def recall(rows: pd.DataFrame) -> float:
        rows = rows.dropna()
        return float((rows["onset_recall"] * rows["n_ref"]).sum() / max(rows["n_ref"].sum(), 1))

    return abs(recall(top) - recall(bottom))


def test_tiny_model_learns_synthetic_piano(trained, desk_data):
    scores = macro_average(evaluate_model(trained(), desk_data["test"]))
    assert scores["onset_f1"] >= 0.85
    assert scores["with_offset_f1"] >= 0.6


def test_autoregressive_context_helps_durations(trained, desk_data):
    full = macro_average(evaluate_model(trained(), desk_data["test"]))
    flat = macro_average(evaluate_model(trained("non_autoregressive"), desk_data["test"]))
    assert full["duration_accuracy"] >= flat["duration_accuracy"]


def test_film_narrows_the_octave_gap(trained, desk_data):
    with_film = _octave_gap(trained(), desk_data["test"])
    without = _octave_gap(trained("no_film"), desk_data["test"])
    if not np.isfinite(with_film) or with_film > without:
        warnings.warn(f"FiLM octave gap {with_film:.3f} exceeds the no_film gap {without:.3f}")


def test_transcribe_command_on_trained_model(trained, desk_data, tmp_path, cli_logging):
    checkpoint = str(tmp_path / "best.ckpt")
    save_checkpoint(trained(), checkpoint)
    scores = []
    for piece in desk_data["test"]:
        output = str(tmp_path / f"{piece.name}.json")
        argv = ["transcribe", "--model", checkpoint, "--input", os.path.join(desk_data["dir"], f"{piece.name}.wav")]
        assert cli.main(argv + ["--output", output]) == cli.EXIT_OK
        scores.append(compute_metrics(piece.notes, read_notes(output)).onset.f1)
    assert np.mean(scores) >= 0.85
