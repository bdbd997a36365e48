"""Notes <-> five-state frame rolls, pedal elongation and recursive context."""
import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from .models import (
    FPS,
    MAX_DURATION_FRAMES,
    MIN_MIDI,
    N_PITCHES,
    ONSET_STATES,
    SOUNDING_STATES,
    NoteEvent,
    NoteState,
    PedalEvent,
    TranscriptEvent,
    sort_notes,
)

_EDGE = 1e-9


class RecursiveContext(BaseModel):
    """Per-pitch autoregressive context: last state, running duration, velocity."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    states: np.ndarray  # [88] NoteState values
    duration: np.ndarray  # [88] frames, clamped at MAX_DURATION_FRAMES
    velocity: np.ndarray  # [88] in [0, 1]

    @classmethod
    def off(cls, n_pitches: int = N_PITCHES) -> "RecursiveContext":
        return cls(
            states=np.full(n_pitches, NoteState.OFF, dtype=np.int64),
            duration=np.zeros(n_pitches, dtype=np.int64),
            velocity=np.zeros(n_pitches, dtype=np.float64),
        )

    def equals(self, other: "RecursiveContext") -> bool:
        return (
            np.array_equal(self.states, other.states)
            and np.array_equal(self.duration, other.duration)
            and np.array_equal(self.velocity, other.velocity)
        )


def advance_context(prev: RecursiveContext, states: np.ndarray, velocity: np.ndarray) -> RecursiveContext:
    """Context after a frame with the given states and onset velocities.

    Onset and re-onset restart the count at 1 with the new velocity. Sustain
    and offset extend a sounding note; without one they carry nothing.
    """
    states = np.asarray(states, dtype=np.int64)
    onset = np.isin(states, ONSET_STATES)
    carry = np.isin(states, (NoteState.SUSTAIN, NoteState.OFFSET)) & np.isin(prev.states, SOUNDING_STATES)
    duration = np.where(onset, 1, np.where(carry, np.minimum(prev.duration + 1, MAX_DURATION_FRAMES), 0))
    vel = np.where(onset, np.asarray(velocity, dtype=np.float64), np.where(carry, prev.velocity, 0.0))
    return RecursiveContext(states=states, duration=duration.astype(np.int64), velocity=vel)


class StateRoll(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    states: np.ndarray  # [T, 88] int
    duration_ctx: np.ndarray  # [T, 88] int
    velocity_ctx: np.ndarray  # [T, 88] float
    onset_mask: np.ndarray  # [T, 88] 0/1

    @property
    def n_frames(self) -> int:
        return self.states.shape[0]

    def previous_context(self) -> Dict[str, np.ndarray]:
        """Context fed at each frame: the roll shifted by one, all-off at t=0."""
        states = np.full_like(self.states, NoteState.OFF)
        duration = np.zeros_like(self.duration_ctx)
        velocity = np.zeros_like(self.velocity_ctx)
        states[1:], duration[1:], velocity[1:] = self.states[:-1], self.duration_ctx[:-1], self.velocity_ctx[:-1]
        return {"states": states, "duration": duration, "velocity": velocity}

    def crop(self, start: int, length: int) -> "StateRoll":
        """Frames [start, start+length), padding past the end with silence."""
        def take(arr, fill):
            out = np.full((length,) + arr.shape[1:], fill, dtype=arr.dtype)
            chunk = arr[start:start + length]
            out[:len(chunk)] = chunk
            return out

        return StateRoll(
            states=take(self.states, NoteState.OFF),
            duration_ctx=take(self.duration_ctx, 0),
            velocity_ctx=take(self.velocity_ctx, 0.0),
            onset_mask=take(self.onset_mask, 0),
        )


def frame_floor(seconds: float, fps: float = FPS) -> int:
    return int(math.floor(seconds * fps + _EDGE))


def frame_ceil(seconds: float, fps: float = FPS) -> int:
    return int(math.ceil(seconds * fps - _EDGE))


# ------------------------------
# Pedal
# ------------------------------

def elongate_with_pedal(
    notes: Sequence[NoteEvent],
    pedals: Sequence[PedalEvent],
    threshold: int = 64,
    end_time: Optional[float] = None,
) -> List[NoteEvent]:
    """Hold offsets while the sustain pedal is down (value >= threshold)."""
    events = sorted(pedals, key=lambda e: e.time)
    times = np.array([e.time for e in events], dtype=np.float64)
    down = np.array([e.value >= threshold for e in events], dtype=bool)
    horizon = end_time
    if horizon is None:
        horizon = max([n.offset for n in notes] + [float(times[-1]) if len(times) else 0.0])

    by_pitch: Dict[int, List[NoteEvent]] = defaultdict(list)
    for n in notes:
        by_pitch[n.pitch].append(n)

    out: List[NoteEvent] = []
    for pitch, group in by_pitch.items():
        group = sorted(group, key=lambda n: n.onset)
        for k, note in enumerate(group):
            offset = note.offset
            idx = int(np.searchsorted(times, offset, side="right")) - 1
            if idx >= 0 and down[idx]:
                ups = np.nonzero(~down[idx + 1:])[0]
                offset = float(times[idx + 1 + ups[0]]) if len(ups) else horizon
            if k + 1 < len(group):
                offset = min(offset, group[k + 1].onset)
            if end_time is not None:
                offset = min(offset, end_time)
            offset = max(offset, note.offset)
            out.append(note.model_copy(update={"offset": offset}))
    return sort_notes(out)


# ------------------------------
# Encode / decode
# ------------------------------

def encode(notes: Sequence[NoteEvent], n_frames: int, fps: float = FPS) -> StateRoll:
    states = np.full((n_frames, N_PITCHES), NoteState.OFF, dtype=np.int64)
    onset_velocity = np.zeros((n_frames, N_PITCHES), dtype=np.float64)

    by_pitch: Dict[int, List[NoteEvent]] = defaultdict(list)
    for n in notes:
        by_pitch[n.pitch].append(n)

    for pitch, group in by_pitch.items():
        p = pitch - MIN_MIDI
        group = sorted(group, key=lambda n: (n.onset, n.offset))
        reonset = False
        for k, note in enumerate(group):
            on = frame_floor(note.onset, fps)
            off = max(on + 1, frame_ceil(note.offset, fps) - 1)
            nxt = group[k + 1] if k + 1 < len(group) else None
            next_on = frame_floor(nxt.onset, fps) if nxt is not None else None
            this_reonset, reonset = reonset, False
            if on >= n_frames:
                continue
            if next_on is not None and next_on <= on:
                # swallowed by a note starting on the same frame
                reonset = this_reonset or note.offset >= nxt.onset
                continue

            end, offset_frame = off, off
            if next_on is not None and note.offset >= nxt.onset:
                end, offset_frame, reonset = next_on, None, True
            elif next_on is not None and off >= next_on:
                end, offset_frame = next_on, None

            states[on, p] = NoteState.REONSET if this_reonset else NoteState.ONSET
            onset_velocity[on, p] = note.velocity / 127.0
            states[on + 1:min(end, n_frames), p] = NoteState.SUSTAIN
            if offset_frame is not None and offset_frame < n_frames:
                states[offset_frame, p] = NoteState.OFFSET

    duration_ctx = np.zeros((n_frames, N_PITCHES), dtype=np.int64)
    velocity_ctx = np.zeros((n_frames, N_PITCHES), dtype=np.float64)
    ctx = RecursiveContext.off()
    for t in range(n_frames):
        ctx = advance_context(ctx, states[t], onset_velocity[t])
        duration_ctx[t] = ctx.duration
        velocity_ctx[t] = ctx.velocity

    return StateRoll(
        states=states,
        duration_ctx=duration_ctx,
        velocity_ctx=velocity_ctx,
        onset_mask=np.isin(states, ONSET_STATES).astype(np.uint8),
    )


def velocity_to_midi(v: float) -> int:
    return int(np.clip(np.rint(127.0 * v), 1, 127))


class NoteTracker:
    """Incremental decoder from per-frame argmax states to note events."""

    def __init__(self, fps: float = FPS, n_pitches: int = N_PITCHES):
        self.fps = fps
        self.open_frame = np.full(n_pitches, -1, dtype=np.int64)
        self.open_velocity = np.zeros(n_pitches, dtype=np.int64)
        self.notes: List[NoteEvent] = []
        self.frames_seen = 0
        self.finished = False

    def _close(self, p: int, frame: int) -> TranscriptEvent:
        pitch = p + MIN_MIDI
        self.notes.append(
            NoteEvent(
                pitch=pitch,
                onset=self.open_frame[p] / self.fps,
                offset=frame / self.fps,
                velocity=int(self.open_velocity[p]),
            )
        )
        self.open_frame[p] = -1
        return TranscriptEvent(kind="note_off", pitch=pitch, time=frame / self.fps, frame=frame)

    def step(self, states: np.ndarray, velocity: np.ndarray) -> List[TranscriptEvent]:
        t = self.frames_seen
        self.frames_seen += 1
        events: List[TranscriptEvent] = []
        for p in np.nonzero((states != NoteState.OFF) | (self.open_frame >= 0))[0]:
            s = states[p]
            is_open = self.open_frame[p] >= 0
            if s in ONSET_STATES:
                if is_open:
                    events.append(self._close(p, t))
                vel = velocity_to_midi(velocity[p])
                self.open_frame[p] = t
                self.open_velocity[p] = vel
                events.append(
                    TranscriptEvent(kind="note_on", pitch=int(p) + MIN_MIDI, time=t / self.fps, frame=t, velocity=vel)
                )
            elif is_open and s in (NoteState.OFFSET, NoteState.OFF):
                events.append(self._close(p, t))
        return events

    def finish(self) -> List[TranscriptEvent]:
        if self.finished:
            return []
        self.finished = True
        return [self._close(p, self.frames_seen) for p in np.nonzero(self.open_frame >= 0)[0]]


def decode(state_argmax: np.ndarray, velocity_pred: np.ndarray, fps: float = FPS) -> List[NoteEvent]:
    tracker = NoteTracker(fps=fps, n_pitches=state_argmax.shape[1])
    for t in range(state_argmax.shape[0]):
        tracker.step(state_argmax[t], velocity_pred[t])
    tracker.finish()
    return sort_notes(tracker.notes)


def events_to_notes(events: Sequence[TranscriptEvent], fps: float = FPS) -> List[NoteEvent]:
    pending: Dict[int, TranscriptEvent] = {}
    notes: List[NoteEvent] = []
    for e in events:
        if e.kind == "note_on":
            pending[e.pitch] = e
        else:
            on = pending.pop(e.pitch)
            notes.append(NoteEvent(pitch=e.pitch, onset=on.time, offset=e.time, velocity=on.velocity))
    return sort_notes(notes)
