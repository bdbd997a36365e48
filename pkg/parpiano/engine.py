"""Frame-by-frame inference shared by offline transcription and live sessions.

``ModelStepper`` consumes one log-mel column at a time. Every layer keeps a
window of its last ``k`` inputs, pre-filled with the zero columns the
full-sequence convolution pads with; ``finish`` feeds each layer its trailing
zero columns in order. The stepper is the only inference path for audio, so
offline and streaming output cannot drift apart.
"""
import logging
import time
from collections import deque
from typing import Callable, Deque, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel

from . import tensor as T
from .bus import CHANNEL_STREAM, EventBus
from .codec import NoteTracker
from .config import latency_ms, lookahead_frames, stream_latency_ms, stream_latency_samples
from .dsp import AudioBuffer, FrontendState, log_mel_matrix
from .errors import ConfigurationError, StateError
from .layers import Conv2d, FiLM
from .models import FRAME_SECONDS, N_MELS, N_PITCHES, SAMPLE_RATE, NoteEvent, TranscriptEvent, sort_notes
from .network import POOL_AFTER, AcousticStack, ParModel, initial_state, recurrent_step
from .tensor import Tensor, conv_time_padding

logger = logging.getLogger(__name__)


class _WindowStage:
    def __init__(self, width: int, past: int, compute: Callable[[List[np.ndarray]], np.ndarray], zero: np.ndarray):
        self.width = width
        self.future = width - 1 - past
        self.zero = zero
        self.compute = compute
        self.window: Deque[np.ndarray] = deque([zero] * past, maxlen=width)

    def push(self, column: np.ndarray) -> Optional[np.ndarray]:
        self.window.append(column)
        if len(self.window) < self.width:
            return None
        return self.compute(list(self.window))


def _conv_film_column(conv: Conv2d, film: Optional[FiLM], pool: bool, n_freq: int, dtype):
    weight, bias = conv.weight.data, conv.bias.data
    k_freq, k_time = weight.shape[2], weight.shape[3]
    pad_f = (k_freq - 1) // 2
    gamma, beta = film.coefficients(n_freq, dtype) if film is not None else (None, None)

    def compute(window: List[np.ndarray]) -> np.ndarray:
        xp = np.pad(np.stack(window, axis=-1), ((0, 0), (pad_f, pad_f), (0, 0)))
        acc = np.zeros((weight.shape[0], n_freq), dtype=np.result_type(xp, weight))
        for i in range(k_freq):
            for j in range(k_time):
                acc += weight[:, :, i, j] @ xp[:, i:i + n_freq, j]
        acc += bias[:, None]
        if gamma is not None:
            acc = acc * gamma + beta
        acc = acc * (acc > 0)
        if pool:
            pairs = acc.reshape(acc.shape[0], n_freq // 2, 2)
            lower, upper = pairs[..., 0], pairs[..., 1]
            acc = np.where(lower >= upper, lower, upper)
        return acc

    return compute


class _BranchStepper:
    """Per-column form of one AcousticStack; emits [88,H] features in frame order."""

    def __init__(self, stack: AcousticStack, n_mels: int, dtype):
        self.stages: List[_WindowStage] = []
        n_freq, c_in = n_mels, 1
        for i, conv in enumerate(stack.convs):
            film = stack.films[i] if stack.films else None
            pool = i in POOL_AFTER
            past, _ = conv_time_padding(conv.k_time)
            compute = _conv_film_column(conv, film, pool, n_freq, dtype)
            self.stages.append(_WindowStage(conv.k_time, past, compute, np.zeros((c_in, n_freq), dtype=dtype)))
            c_in = conv.weight.shape[0]
            if pool:
                n_freq //= 2

        head = stack.head

        def frame_features(window: List[np.ndarray]) -> np.ndarray:
            return head.frame_features(Tensor(window[0][None, :, :, None])).data[0, 0]

        def per_pitch(window: List[np.ndarray]) -> np.ndarray:
            return head.per_pitch(Tensor(np.concatenate(window, axis=-1))).data

        self.stages.append(_WindowStage(1, 0, frame_features, np.zeros((c_in, n_freq), dtype=dtype)))
        self.stages.append(
            _WindowStage(
                stack.multistep_W, 0, per_pitch, np.zeros((N_PITCHES, head.frame_width), dtype=dtype)
            )
        )

    def _feed(self, start: int, columns: List[np.ndarray]) -> List[np.ndarray]:
        for stage in self.stages[start:]:
            produced = []
            for column in columns:
                out = stage.push(column)
                if out is not None:
                    produced.append(out)
            columns = produced
        return columns

    def push(self, mel_column: np.ndarray) -> List[np.ndarray]:
        return self._feed(0, [mel_column[None, :]])

    def finish(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for k, stage in enumerate(self.stages):
            out.extend(self._feed(k, [stage.zero] * stage.future))
        return out


class ModelStepper:
    def __init__(self, model: ParModel, record_latency: bool = False):
        self.model = model
        self.dtype = model.dtype
        with T.no_grad():
            self._note = _BranchStepper(model.note_acoustic, N_MELS, self.dtype)
            self._velocity = _BranchStepper(model.velocity_acoustic, N_MELS, self.dtype)
        self.state = initial_state(model)
        self.tracker = NoteTracker()
        self.mel_frames_seen = 0
        self.record_latency = record_latency
        self.trace: List[Tuple[int, int]] = []
        self.finished = False

    @property
    def frames_emitted(self) -> int:
        return self.state.frame_index

    def _advance(self, note_feats: List[np.ndarray], velocity_feats: List[np.ndarray]) -> List[TranscriptEvent]:
        events: List[TranscriptEvent] = []
        for note_feat, velocity_feat in zip(note_feats, velocity_feats):
            if self.record_latency:
                self.trace.append((self.state.frame_index, self.mel_frames_seen))
            out, self.state = recurrent_step(self.model, note_feat, velocity_feat, self.state)
            events.extend(self.tracker.step(out.states, out.velocity))
        return events

    def push_mel(self, column: np.ndarray) -> List[TranscriptEvent]:
        if self.finished:
            raise StateError("stepper already finished")
        column = np.asarray(column, dtype=self.dtype)
        self.mel_frames_seen += 1
        with T.no_grad():
            return self._advance(self._note.push(column), self._velocity.push(column))

    def finish(self) -> List[TranscriptEvent]:
        if self.finished:
            return []
        self.finished = True
        with T.no_grad():
            events = self._advance(self._note.finish(), self._velocity.finish())
        return events + self.tracker.finish()

    def notes(self) -> List[NoteEvent]:
        return sort_notes(self.tracker.notes)


class StreamSession:
    """Live transcription: push audio chunks, receive note events as soon as they are final.

    The session owns its frontend and model state; drive it from one thread.
    """

    def __init__(self, model: ParModel, bus: Optional[EventBus] = None, record_latency: bool = False):
        self.config = model.config
        self.latency_ms = latency_ms(model.config)
        self.stream_latency_ms = stream_latency_ms(model.config)
        self.latency_samples = stream_latency_samples(model.config)
        self.lookahead_frames = lookahead_frames(model.config)
        self.frontend = FrontendState()
        self.stepper = ModelStepper(model, record_latency=record_latency)
        self.bus = bus
        self.finalized = False

    def _publish(self, events: List[TranscriptEvent]) -> List[TranscriptEvent]:
        if self.bus is not None:
            for e in events:
                self.bus.emit(CHANNEL_STREAM, e.frame, e.kind, pitch=e.pitch, time=e.time, velocity=e.velocity)
        return events

    def push(self, samples) -> List[TranscriptEvent]:
        if self.finalized:
            raise StateError("push after finalize")
        events: List[TranscriptEvent] = []
        for frame in self.frontend.push(samples):
            events.extend(self.stepper.push_mel(frame.values))
        return self._publish(events)

    def finalize(self) -> List[TranscriptEvent]:
        """Flush the frontend tail, pad the model's lookahead with zeros and close open notes."""
        if self.finalized:
            return []
        self.finalized = True
        events: List[TranscriptEvent] = []
        for frame in self.frontend.flush():
            events.extend(self.stepper.push_mel(frame.values))
        events.extend(self.stepper.finish())
        logger.debug("stream finalized after %d frames", self.stepper.frames_emitted)
        return self._publish(events)

    @property
    def latency_trace(self) -> List[Tuple[int, int]]:
        """(frame index, mel frames received) at the moment each frame was produced."""
        return list(self.stepper.trace)

    def notes(self) -> List[NoteEvent]:
        return self.stepper.notes()


def transcribe_audio(model: ParModel, audio: Union[AudioBuffer, np.ndarray]) -> List[NoteEvent]:
    """Offline transcription through the same stepper the live session uses."""
    samples = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)
    mel = log_mel_matrix(samples)
    stepper = ModelStepper(model)
    for t in range(mel.shape[1]):
        stepper.push_mel(mel[:, t])
    stepper.finish()
    notes = stepper.notes()
    logger.info("transcribed %.2f s of audio into %d notes", len(samples) / SAMPLE_RATE, len(notes))
    return notes


class StepTiming(BaseModel):
    n_trials: int
    mean_ms: float
    p95_ms: float
    real_time_factor: float


def measure_step_time(model: ParModel, n_trials: int, seed: int = 0) -> StepTiming:
    """Wall-clock cost of one frame (both branches and the sequence step)."""
    if n_trials <= 0:
        raise ConfigurationError(f"n_trials must be positive, got {n_trials}")
    rng = np.random.default_rng(seed)
    stepper = ModelStepper(model)
    columns = rng.normal(-5.0, 2.0, size=(lookahead_frames(model.config) + n_trials, N_MELS))
    for column in columns[:-n_trials]:
        stepper.push_mel(column)

    timings = np.empty(n_trials)
    for k, column in enumerate(columns[-n_trials:]):
        start = time.perf_counter()
        stepper.push_mel(column)
        timings[k] = (time.perf_counter() - start) * 1000.0
    mean_ms = float(timings.mean())
    return StepTiming(
        n_trials=n_trials,
        mean_ms=mean_ms,
        p95_ms=float(np.percentile(timings, 95)),
        real_time_factor=1000.0 * FRAME_SECONDS / mean_ms if mean_ms > 0 else float("inf"),
    )
