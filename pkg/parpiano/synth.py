"""Deterministic piano-like scores, additive rendering and dataset directories."""
import logging
import math
import os
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from .codec import elongate_with_pedal
from .config import SynthSpec
from .dsp import AudioBuffer
from .errors import DataError
from .files import read_notes_json, read_wav, write_notes_json, write_pedal_json, write_wav
from .models import SAMPLE_RATE, NoteEvent, PedalEvent, sort_notes

logger = logging.getLogger(__name__)

PEAK = 0.9
MANIFEST = "manifest.json"
Split = Literal["train", "valid", "test"]


def _rng(spec: SynthSpec, piece_index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, piece_index])


def sample_pedals(spec: SynthSpec, rng: np.random.Generator) -> List[PedalEvent]:
    """Alternating press/release events; presses are >= 64, releases below."""
    pedals: List[PedalEvent] = []
    t = float(rng.exponential(2.0))
    while t < spec.piece_seconds:
        release = min(t + float(rng.uniform(0.5, 3.0)), spec.piece_seconds)
        pedals.append(PedalEvent(time=t, value=int(rng.integers(64, 128))))
        pedals.append(PedalEvent(time=release, value=int(rng.integers(0, 64))))
        t = release + float(rng.exponential(2.0))
    return pedals


def sample_score(spec: SynthSpec, piece_index: int) -> Tuple[List[NoteEvent], List[PedalEvent]]:
    if spec.note_rate <= 0:
        return [], []
    rng = _rng(spec, piece_index)
    lo, hi = spec.pitch_range
    d_lo, d_hi = spec.duration_range
    v_lo, v_hi = spec.velocity_range
    last_release = {}
    notes: List[NoteEvent] = []

    t = float(rng.exponential(1.0 / spec.note_rate))
    while t < spec.piece_seconds - d_lo:
        duration = math.exp(rng.uniform(math.log(d_lo), math.log(d_hi)))
        pitch = int(rng.integers(lo, hi + 1))
        velocity = int(rng.integers(v_lo, v_hi + 1))
        offset = min(t + duration, spec.piece_seconds)
        sounding = sum(1 for n in notes if n.offset > t)
        free = last_release.get(pitch, -math.inf) + spec.min_gap <= t
        if sounding < spec.max_polyphony and free and offset > t:
            notes.append(NoteEvent(pitch=pitch, onset=t, offset=offset, velocity=velocity))
            last_release[pitch] = offset
        t += float(rng.exponential(1.0 / spec.note_rate))

    pedals = sample_pedals(spec, rng) if rng.random() < spec.pedal_prob else []
    return sort_notes(notes), pedals


def decay_time(pitch: int, spec: Optional[SynthSpec] = None) -> float:
    spec = spec or SynthSpec()
    return spec.decay_base * 0.5 ** ((pitch - 21) / spec.decay_halving)


def render_audio(
    notes: List[NoteEvent],
    sample_rate: int = SAMPLE_RATE,
    spec: Optional[SynthSpec] = None,
    n_samples: Optional[int] = None,
) -> AudioBuffer:
    """Sum of decaying harmonic partials per note, normalised to a 0.9 peak."""
    spec = spec or SynthSpec()
    if n_samples is None:
        end = max((n.offset for n in notes), default=0.0) + spec.release
        n_samples = int(math.ceil(end * sample_rate)) if notes else 0
    out = np.zeros(n_samples, dtype=np.float64)
    nyquist = sample_rate / 2

    for note in notes:
        start = int(round(note.onset * sample_rate))
        stop = min(n_samples, int(round((note.offset + spec.release) * sample_rate)))
        if stop <= start:
            continue
        t = np.arange(stop - start) / sample_rate
        held = note.offset - note.onset
        envelope = np.minimum(1.0, t / spec.attack) * np.exp(-t / decay_time(note.pitch, spec))
        envelope *= np.clip(1.0 - (t - held) / spec.release, 0.0, 1.0)
        f0 = 440.0 * 2.0 ** ((note.pitch - 69) / 12.0)
        tone = np.zeros_like(t)
        for h in range(1, spec.partials + 1):
            if h * f0 >= nyquist:
                break
            tone += h ** -1.5 * np.sin(2 * np.pi * h * f0 * t)
        out[start:stop] += (note.velocity / 127.0) * envelope * tone

    peak = np.max(np.abs(out)) if n_samples else 0.0
    if peak > 0:
        out *= PEAK / peak
    return AudioBuffer(samples=out, sample_rate=sample_rate)


# ------------------------------
# Dataset directories
# ------------------------------

class PieceEntry(BaseModel):
    name: str
    index: int
    split: Split
    audio: str
    notes: str
    pedal: str
    seconds: float


class Manifest(BaseModel):
    spec: SynthSpec
    pieces: List[PieceEntry]

    def split(self, name: Split) -> List[PieceEntry]:
        return [p for p in self.pieces if p.split == name]


def assign_splits(n_pieces: int, valid_fraction: float, test_fraction: float) -> List[Split]:
    n_test = int(round(n_pieces * test_fraction))
    n_valid = int(round(n_pieces * valid_fraction))
    n_train = max(0, n_pieces - n_test - n_valid)
    return (["train"] * n_train + ["valid"] * n_valid + ["test"] * n_test)[:n_pieces]


def write_dataset(spec: SynthSpec, out_dir: str) -> Manifest:
    """Render every piece; labels are the pedal-elongated notes that were rendered."""
    os.makedirs(out_dir, exist_ok=True)
    n_samples = int(round(spec.piece_seconds * SAMPLE_RATE))
    entries: List[PieceEntry] = []
    for index, split in enumerate(assign_splits(spec.n_pieces, spec.valid_fraction, spec.test_fraction)):
        name = f"piece_{index:04d}"
        notes, pedals = sample_score(spec, index)
        sounding = elongate_with_pedal(notes, pedals, end_time=spec.piece_seconds)
        audio = render_audio(sounding, spec=spec, n_samples=n_samples)
        entry = PieceEntry(
            name=name,
            index=index,
            split=split,
            audio=f"{name}.wav",
            notes=f"{name}.json",
            pedal=f"{name}.pedal.json",
            seconds=spec.piece_seconds,
        )
        write_wav(os.path.join(out_dir, entry.audio), audio)
        write_notes_json(os.path.join(out_dir, entry.notes), sounding)
        write_pedal_json(os.path.join(out_dir, entry.pedal), pedals)
        entries.append(entry)

    manifest = Manifest(spec=spec, pieces=entries)
    with open(os.path.join(out_dir, MANIFEST), "w") as f:
        f.write(manifest.model_dump_json(indent=2))
    logger.info("wrote %d pieces to %s", len(entries), out_dir)
    return manifest


def load_manifest(dataset_dir: str) -> Manifest:
    path = os.path.join(dataset_dir, MANIFEST)
    try:
        with open(path) as f:
            return Manifest.model_validate_json(f.read())
    except OSError as exc:
        raise DataError(f"no dataset manifest at {path}") from exc
    except ValidationError as exc:
        raise DataError(f"invalid manifest {path}: {exc}") from exc


def load_piece(dataset_dir: str, entry: PieceEntry) -> Tuple[AudioBuffer, List[NoteEvent]]:
    audio = read_wav(os.path.join(dataset_dir, entry.audio))
    return audio, read_notes_json(os.path.join(dataset_dir, entry.notes))
