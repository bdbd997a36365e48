import json
import os

import numpy as np
import pytest

from parpiano.codec import elongate_with_pedal
from parpiano.config import SynthSpec
from parpiano.errors import DataError
from parpiano.files import read_notes_json, read_pedal_json
from parpiano.models import SAMPLE_RATE, NoteEvent
from parpiano.synth import (
    MANIFEST,
    PEAK,
    assign_splits,
    decay_time,
    load_manifest,
    load_piece,
    render_audio,
    sample_score,
)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x ** 2)))


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


class TestScores:
    def test_zero_rate_gives_empty_score(self):
        assert sample_score(SynthSpec(note_rate=0.0), 0) == ([], [])

    def test_deterministic_per_seed_and_index(self):
        spec = SynthSpec(seed=5, piece_seconds=5.0)
        assert sample_score(spec, 2) == sample_score(spec, 2)
        assert sample_score(spec, 2) != sample_score(spec, 3)
        assert sample_score(spec, 2) != sample_score(SynthSpec(seed=6, piece_seconds=5.0), 2)

    @pytest.mark.parametrize("seed", range(10))
    def test_score_constraints(self, seed):
        spec = SynthSpec(seed=seed, piece_seconds=8.0, note_rate=6.0, pitch_range=(40, 50), max_polyphony=2)
        notes, pedals = sample_score(spec, 0)
        assert notes
        assert all(40 <= n.pitch <= 50 for n in notes)
        assert all(n.offset <= spec.piece_seconds for n in notes)
        for note in notes:
            assert sum(1 for n in notes if n.onset <= note.onset < n.offset) <= spec.max_polyphony
        by_pitch = {}
        for note in sorted(notes, key=lambda n: n.onset):
            prev = by_pitch.get(note.pitch)
            assert prev is None or prev.offset + spec.min_gap <= note.onset + 1e-12
            by_pitch[note.pitch] = note
        assert all(a.time < b.time for a, b in zip(pedals, pedals[1:]))

    def test_pedals_alternate(self):
        spec = SynthSpec(seed=1, piece_seconds=30.0, pedal_prob=1.0)
        _, pedals = sample_score(spec, 0)
        assert pedals
        assert [p.value >= 64 for p in pedals] == [True, False] * (len(pedals) // 2)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


class TestRender:
    def test_empty_score_is_silence(self):
        audio = render_audio([], n_samples=1000)
        assert audio.samples.shape == (1000,)
        assert not audio.samples.any()
        assert render_audio([]).samples.size == 0

    def test_peak_is_normalised(self):
        notes = [NoteEvent(pitch=60, onset=0.0, offset=0.5, velocity=30), NoteEvent(pitch=64, onset=0.1, offset=0.6, velocity=100)]
        audio = render_audio(notes)
        assert np.max(np.abs(audio.samples)) == pytest.approx(PEAK)
        assert audio.sample_rate == SAMPLE_RATE

    def test_a4_spectrum_peaks_at_440(self):
        audio = render_audio([NoteEvent(pitch=69, onset=0.0, offset=1.0, velocity=100)], n_samples=SAMPLE_RATE)
        spectrum = np.abs(np.fft.rfft(audio.samples))
        freqs = np.fft.rfftfreq(SAMPLE_RATE, 1.0 / SAMPLE_RATE)
        assert freqs[np.argmax(spectrum)] == pytest.approx(440.0, abs=1.0)

    def test_high_notes_decay_faster(self):
        assert decay_time(96) < decay_time(30)
        assert decay_time(21) == pytest.approx(2.0)
        assert decay_time(65) == pytest.approx(1.0)

    def test_note_stands_above_the_release_tail(self):
        note = NoteEvent(pitch=57, onset=0.0, offset=0.5, velocity=90)
        samples = render_audio([note], n_samples=SAMPLE_RATE).samples
        sounding = samples[: SAMPLE_RATE // 2]
        tail = samples[int(0.55 * SAMPLE_RATE):]
        assert 20 * np.log10(_rms(sounding) / max(_rms(tail), 1e-12)) >= 20.0

    def test_length_follows_last_release(self):
        spec = SynthSpec()
        audio = render_audio([NoteEvent(pitch=60, onset=0.0, offset=1.0, velocity=64)], spec=spec)
        assert len(audio.samples) == int(np.ceil((1.0 + spec.release) * SAMPLE_RATE))


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------


class TestDataset:
    def test_assign_splits(self):
        assert assign_splits(10, 0.1, 0.2) == ["train"] * 7 + ["valid"] + ["test"] * 2
        assert assign_splits(2, 0.5, 0.5) == ["valid", "test"]
        assert assign_splits(0, 0.1, 0.1) == []

    def test_manifest_lists_every_piece(self, dataset_dir, synth_spec):
        manifest = load_manifest(dataset_dir)
        assert manifest.spec == synth_spec
        assert [p.name for p in manifest.pieces] == [f"piece_{i:04d}" for i in range(synth_spec.n_pieces)]
        assert [len(manifest.split(s)) for s in ("train", "valid", "test")] == [2, 1, 1]
        for entry in manifest.pieces:
            for name in (entry.audio, entry.notes, entry.pedal):
                assert os.path.exists(os.path.join(dataset_dir, name))

    def test_labels_are_the_elongated_notes(self, dataset_dir, synth_spec):
        manifest = load_manifest(dataset_dir)
        for entry in manifest.pieces:
            notes, pedals = sample_score(synth_spec, entry.index)
            expected = elongate_with_pedal(notes, pedals, end_time=synth_spec.piece_seconds)
            audio, labels = load_piece(dataset_dir, entry)
            assert labels == expected
            assert read_pedal_json(os.path.join(dataset_dir, entry.pedal)) == pedals
            assert len(audio.samples) == int(round(synth_spec.piece_seconds * SAMPLE_RATE))
            assert read_notes_json(os.path.join(dataset_dir, entry.notes)) == labels

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(str(tmp_path))

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / MANIFEST).write_text(json.dumps({"pieces": "nope"}))
        with pytest.raises(DataError):
            load_manifest(str(tmp_path))
