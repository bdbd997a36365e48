"""Log-mel frontend, batch and streaming.

Both paths run every frame through ``_frame_to_logmel`` on an identical
4096-sample window, so streaming output is bit-identical to batch output
for any chunking.
"""
import logging
import math
from functools import lru_cache
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.signal import get_window

from .errors import ConfigurationError, StateError
from .models import F_MAX, F_MIN, FRAME_SECONDS, HOP_LENGTH, LOG_EPS, N_FFT, N_MELS, SAMPLE_RATE

logger = logging.getLogger(__name__)


class AudioBuffer(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @field_validator("samples", mode="before")
    @classmethod
    def _finite_mono(cls, v):
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("audio contains non-finite samples")
        if v.size and np.abs(v).max() > 1.0:
            raise ValueError(f"audio samples must lie in [-1, 1], peak is {np.abs(v).max():.3f}")
        return v

    @field_validator("sample_rate")
    @classmethod
    def _rate(cls, v):
        if v != SAMPLE_RATE:
            raise ValueError(f"engine accepts {SAMPLE_RATE} Hz audio only, got {v}")
        return v


class MelFrame(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    frame_index: int

    @property
    def frame_time(self) -> float:
        return self.frame_index * FRAME_SECONDS


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    return mel_to_hz(points[1:-1])


def build_mel_filterbank(
    n_mels: int = N_MELS,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1), peak 1.

    The default grid tops out at C8 (8372 Hz), a little above the 8 kHz Nyquist
    limit; filters centred past Nyquist fall back to the top FFT bin. Any other
    band reaching past Nyquist is rejected.
    """
    nyquist = sample_rate / 2
    if f_min >= nyquist:
        raise ConfigurationError(f"band starting at {f_min} Hz has no FFT bins below Nyquist {nyquist} Hz")
    if f_max > nyquist and f_max != F_MAX:
        raise ConfigurationError(f"f_max {f_max} Hz exceeds Nyquist {nyquist} Hz")
    if not 0 <= f_min < f_max:
        raise ConfigurationError(f"invalid band [{f_min}, {f_max}] Hz")
    if n_mels < 1:
        raise ConfigurationError("n_mels must be positive")

    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - left) / (center - left)
    falling = (right - fft_freqs[None, :]) / (right - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))

    # Low filters can be narrower than the FFT bin spacing and the top ones sit
    # past Nyquist; give them the nearest bin.
    empty = ~np.any(bank > 0, axis=1)
    if np.any(empty):
        nearest = np.abs(fft_freqs[None, :] - edges[1:-1, None]).argmin(axis=1)
        bank[np.nonzero(empty)[0], nearest[empty]] = 1.0
        logger.debug("mel filterbank: %d filters narrower than one FFT bin", int(empty.sum()))
    return bank


@lru_cache(maxsize=4)
def _default_bank() -> np.ndarray:
    bank = build_mel_filterbank()
    bank.setflags(write=False)
    return bank


@lru_cache(maxsize=4)
def _hann(n_fft: int) -> np.ndarray:
    window = get_window("hann", n_fft, fftbins=True).astype(np.float64)
    window.setflags(write=False)
    return window


def _frame_to_logmel(segment: np.ndarray) -> np.ndarray:
    spectrum = np.fft.rfft(segment * _hann(N_FFT))
    power = spectrum.real ** 2 + spectrum.imag ** 2
    return np.log(_default_bank() @ power + LOG_EPS)


def n_frames_for(n_samples: int) -> int:
    return int(math.ceil(n_samples / HOP_LENGTH))


def log_mel_frames(audio: AudioBuffer) -> List[MelFrame]:
    matrix = log_mel_matrix(audio.samples)
    return [MelFrame(values=matrix[:, t], frame_index=t) for t in range(matrix.shape[1])]


def log_mel_matrix(samples: np.ndarray) -> np.ndarray:
    """Batch frontend as an (n_mels, n_frames) array."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    n_frames = n_frames_for(len(samples))
    half = N_FFT // 2
    padded = np.concatenate([np.zeros(half), samples, np.zeros(half)])
    out = np.empty((N_MELS, n_frames), dtype=np.float64)
    for t in range(n_frames):
        start = t * HOP_LENGTH
        out[:, t] = _frame_to_logmel(padded[start:start + N_FFT])
    return out


class FrontendState:
    """Incremental log-mel frontend; one owner at a time."""

    def __init__(self):
        half = N_FFT // 2
        self._buffer = np.zeros(half, dtype=np.float64)  # left center padding
        self._buffer_start = 0  # padded-stream index of _buffer[0]
        self._n_samples = 0
        self._next_frame = 0
        self._flushed = False

    @property
    def n_samples(self) -> int:
        return self._n_samples

    @property
    def frames_emitted(self) -> int:
        return self._next_frame

    def _drain(self, limit: Optional[int] = None) -> List[MelFrame]:
        frames: List[MelFrame] = []
        while limit is None or self._next_frame < limit:
            start = self._next_frame * HOP_LENGTH - self._buffer_start
            if start + N_FFT > len(self._buffer):
                break
            values = _frame_to_logmel(self._buffer[start:start + N_FFT])
            frames.append(MelFrame(values=values, frame_index=self._next_frame))
            self._next_frame += 1
        drop = self._next_frame * HOP_LENGTH - self._buffer_start
        if drop > 0:
            self._buffer = self._buffer[drop:]
            self._buffer_start += drop
        return frames

    def push(self, chunk) -> List[MelFrame]:
        if self._flushed:
            raise StateError("frontend already flushed")
        chunk = np.asarray(chunk, dtype=np.float64).reshape(-1)
        if chunk.size == 0:
            return []
        self._buffer = np.concatenate([self._buffer, chunk])
        self._n_samples += chunk.size
        return self._drain()

    def flush(self) -> List[MelFrame]:
        """Emit the tail frames whose windows extend past the end of the audio."""
        if self._flushed:
            return []
        self._flushed = True
        total = n_frames_for(self._n_samples)
        self._buffer = np.concatenate([self._buffer, np.zeros(N_FFT // 2)])
        return self._drain(limit=total)
