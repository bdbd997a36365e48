"""Audio, note and pedal file I/O."""
import logging
import os
from typing import List, Tuple

import mido
import numpy as np
import pandas as pd
from pydantic import TypeAdapter, ValidationError
from scipy.io import wavfile

from .dsp import AudioBuffer
from .errors import DataError
from .models import MAX_MIDI, MIN_MIDI, SAMPLE_RATE, NoteEvent, PedalEvent, sort_notes

logger = logging.getLogger(__name__)

NOTE_COLUMNS = ["pitch", "onset", "offset", "velocity"]
_NOTES = TypeAdapter(List[NoteEvent])
_PEDALS = TypeAdapter(List[PedalEvent])


# ------------------------------
# Audio
# ------------------------------

def pcm16_to_float(raw: bytes) -> np.ndarray:
    """Little-endian signed 16-bit PCM to floats in [-1, 1)."""
    usable = len(raw) - len(raw) % 2
    return np.frombuffer(raw[:usable], dtype="<i2").astype(np.float64) / 32768.0


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    return data.astype(np.float64)


def resample_linear(samples: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    if rate_in == rate_out or len(samples) == 0:
        return samples
    n_out = int(round(len(samples) * rate_out / rate_in))
    t_out = np.arange(n_out) / rate_out
    t_in = np.arange(len(samples)) / rate_in
    return np.interp(t_out, t_in, samples)


def read_wav(path: str) -> AudioBuffer:
    """Mono 16 kHz audio; other rates are resampled linearly with a warning."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    samples = _to_float(np.asarray(data))
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if rate != SAMPLE_RATE:
        logger.warning("%s: resampling %d Hz -> %d Hz (linear)", path, rate, SAMPLE_RATE)
        samples = resample_linear(samples, rate, SAMPLE_RATE)
    try:
        return AudioBuffer(samples=samples, sample_rate=SAMPLE_RATE)
    except ValidationError as exc:
        raise DataError(f"invalid audio in {path}: {exc}") from exc


def write_wav(path: str, audio: AudioBuffer) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    wavfile.write(path, audio.sample_rate, audio.samples.astype(np.float32))


# ------------------------------
# Notes
# ------------------------------

def write_notes_json(path: str, notes: List[NoteEvent]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(_NOTES.dump_json(sort_notes(list(notes)), indent=1))


def read_notes_json(path: str) -> List[NoteEvent]:
    try:
        with open(path, "rb") as f:
            return sort_notes(_NOTES.validate_json(f.read()))
    except OSError as exc:
        raise DataError(f"cannot read notes {path}: {exc}") from exc
    except ValidationError as exc:
        raise DataError(f"invalid notes in {path}: {exc}") from exc


def notes_to_dataframe(notes: List[NoteEvent]) -> pd.DataFrame:
    if not notes:
        return pd.DataFrame(columns=NOTE_COLUMNS)
    return pd.DataFrame([n.model_dump() for n in notes])[NOTE_COLUMNS]


def write_notes_csv(path: str, notes: List[NoteEvent]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    notes_to_dataframe(sort_notes(list(notes))).to_csv(path, index=False)


def read_notes_csv(path: str) -> List[NoteEvent]:
    try:
        df = pd.read_csv(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read notes {path}: {exc}") from exc
    missing = [c for c in NOTE_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    try:
        return sort_notes(_NOTES.validate_python(df[NOTE_COLUMNS].to_dict("records")))
    except ValidationError as exc:
        raise DataError(f"invalid notes in {path}: {exc}") from exc


def read_midi(path: str) -> Tuple[List[NoteEvent], List[PedalEvent]]:
    """Note-on/off and sustain pedal (CC64) events; other messages are ignored."""
    try:
        midi = mido.MidiFile(path)
    except (OSError, ValueError, EOFError) as exc:
        raise DataError(f"cannot read MIDI {path}: {exc}") from exc

    now = 0.0
    open_notes = {}
    notes: List[NoteEvent] = []
    pedals: List[PedalEvent] = []
    for msg in midi:
        now += msg.time
        if msg.type == "control_change" and msg.control == 64:
            pedals.append(PedalEvent(time=now, value=msg.value))
        elif msg.type in ("note_on", "note_off") and MIN_MIDI <= msg.note <= MAX_MIDI:
            key = (msg.channel, msg.note)
            if key in open_notes:
                onset, velocity = open_notes.pop(key)
                if now > onset:
                    notes.append(NoteEvent(pitch=msg.note, onset=onset, offset=now, velocity=velocity))
            if msg.type == "note_on" and msg.velocity > 0:
                open_notes[key] = (now, msg.velocity)
    for (_, pitch), (onset, velocity) in open_notes.items():
        if now > onset:
            notes.append(NoteEvent(pitch=pitch, onset=onset, offset=now, velocity=velocity))
    return sort_notes(notes), pedals


def read_notes(path: str) -> List[NoteEvent]:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".json":
        return read_notes_json(path)
    if ext == ".csv":
        return read_notes_csv(path)
    if ext in (".mid", ".midi"):
        return read_midi(path)[0]
    raise DataError(f"unsupported note file type: {path}")


def write_notes(path: str, notes: List[NoteEvent]) -> None:
    if path.lower().endswith(".csv"):
        write_notes_csv(path, notes)
    else:
        write_notes_json(path, notes)


# ------------------------------
# Pedal
# ------------------------------

def write_pedal_json(path: str, pedals: List[PedalEvent]) -> None:
    with open(path, "wb") as f:
        f.write(_PEDALS.dump_json(list(pedals), indent=1))


def read_pedal_json(path: str) -> List[PedalEvent]:
    try:
        with open(path, "rb") as f:
            return _PEDALS.validate_json(f.read())
    except OSError as exc:
        raise DataError(f"cannot read pedal events {path}: {exc}") from exc
    except ValidationError as exc:
        raise DataError(f"invalid pedal events in {path}: {exc}") from exc
