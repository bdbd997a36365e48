from enum import IntEnum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

# Audio / frame grid constants
SAMPLE_RATE = 16000
HOP_LENGTH = 512
N_FFT = 4096
N_MELS = 700
F_MIN = 27.5
F_MAX = 8372.0
FPS = SAMPLE_RATE / HOP_LENGTH  # 31.25
FRAME_SECONDS = HOP_LENGTH / SAMPLE_RATE  # 0.032
LOG_EPS = 1e-5

# Piano keyboard
MIN_MIDI = 21
MAX_MIDI = 108
N_PITCHES = MAX_MIDI - MIN_MIDI + 1  # 88

# Recursive context
MAX_DURATION_FRAMES = 156  # ~5 s
N_STATES = 5


class NoteState(IntEnum):
    OFF = 0
    ONSET = 1
    REONSET = 2
    SUSTAIN = 3
    OFFSET = 4


SOUNDING_STATES = (NoteState.ONSET, NoteState.REONSET, NoteState.SUSTAIN)
ONSET_STATES = (NoteState.ONSET, NoteState.REONSET)


# ------------------------------
# Note-level records
# ------------------------------

class NoteEvent(BaseModel):
    pitch: int = Field(ge=MIN_MIDI, le=MAX_MIDI)
    onset: float = Field(ge=0.0)
    offset: float
    velocity: int = Field(ge=1, le=127)

    @model_validator(mode="after")
    def _offset_after_onset(self):
        if not self.offset > self.onset:
            raise ValueError(f"offset {self.offset} must be after onset {self.onset}")
        return self

    @property
    def duration(self) -> float:
        return self.offset - self.onset


class PedalEvent(BaseModel):
    time: float = Field(ge=0.0)
    value: int = Field(ge=0, le=127)


class TranscriptEvent(BaseModel):
    kind: Literal["note_on", "note_off"]
    pitch: int
    time: float
    frame: int
    velocity: Optional[int] = None


# ------------------------------
# Metrics records
# ------------------------------

class PRF(BaseModel):
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_counts(cls, matched: int, n_ref: int, n_est: int) -> "PRF":
        p = matched / n_est if n_est > 0 else 0.0
        r = matched / n_ref if n_ref > 0 else 0.0
        f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        return cls(precision=p, recall=r, f1=f)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.precision, self.recall, self.f1)


class NoteMetrics(BaseModel):
    onset: PRF = Field(default_factory=PRF)
    with_offset: PRF = Field(default_factory=PRF)
    with_offset_velocity: PRF = Field(default_factory=PRF)
    duration_accuracy: float = 0.0
    long_note_rate: float = 0.0
    counts: Dict[str, int] = Field(default_factory=dict)

    def flat(self) -> Dict[str, float]:
        row: Dict[str, float] = {}
        for tier in ("onset", "with_offset", "with_offset_velocity"):
            prf: PRF = getattr(self, tier)
            row[f"{tier}_p"] = prf.precision
            row[f"{tier}_r"] = prf.recall
            row[f"{tier}_f1"] = prf.f1
        row["duration_accuracy"] = self.duration_accuracy
        row["long_note_rate"] = self.long_note_rate
        return row


def sort_notes(notes: List[NoteEvent]) -> List[NoteEvent]:
    return sorted(notes, key=lambda n: (n.onset, n.pitch, n.offset))
