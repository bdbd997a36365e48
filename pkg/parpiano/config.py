import math
import os
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import ConfigurationError
from .models import FPS, FRAME_SECONDS, HOP_LENGTH, MAX_MIDI, MIN_MIDI, N_FFT, SAMPLE_RATE

Variant = Literal["PAR", "Compact"]

# Filter-width tuples of the latency experiment, bottom layer first.
LATENCY_PRESETS: List[Tuple[int, ...]] = [
    (1, 1, 1, 1, 1, 1),
    (3, 1, 1, 1, 1, 1),
    (3, 1, 3, 1, 1, 1),
    (3, 1, 3, 1, 3, 1),
    (3, 3, 3, 3, 3, 3),
]

# name -> (conv channels, lstm units, hidden units per pitch)
COMPACT_LADDER: Dict[str, Tuple[int, int, int]] = {
    "base": (48, 48, 48),
    "middle": (32, 32, 32),
    "small": (16, 16, 16),
    "tiny": (8, 8, 8),
    "bottleneck": (8, 8, 1),
}

ABLATIONS = ("no_film", "global_lstm", "simple_context", "non_autoregressive")


class Ablations(BaseModel):
    no_film: bool = False
    global_lstm: bool = False
    simple_context: bool = False
    non_autoregressive: bool = False


class ModelConfig(BaseModel):
    variant: Variant = "PAR"
    conv_channels: int = Field(default=48, ge=1)
    fc_units: int = Field(default=768, ge=1)
    hidden_per_pitch: int = Field(default=48, ge=1)
    lstm_units: int = Field(default=48, ge=1)
    lstm_layers: int = Field(default=2, ge=1)
    multistep_W: int = Field(default=5, ge=1)
    context_dim: int = Field(default=4, ge=1)
    context_hidden: int = Field(default=16, ge=1)
    filter_widths: Tuple[int, int, int, int, int, int] = (3, 3, 3, 3, 3, 3)
    film_hidden: int = Field(default=16, ge=1)
    film_layers: int = Field(default=3, ge=1)
    global_lstm_units: int = Field(default=256, ge=1)
    ablations: Ablations = Field(default_factory=Ablations)
    seed: int = 0

    @field_validator("filter_widths")
    @classmethod
    def _odd_widths(cls, v):
        for w in v:
            if w < 1 or w % 2 == 0:
                raise ConfigurationError(f"filter widths must be odd and positive, got {tuple(v)}")
        return tuple(v)

    def with_ablation(self, name: str) -> "ModelConfig":
        if name not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {name!r}")
        abl = self.ablations.model_copy(update={name: True})
        return self.model_copy(update={"ablations": abl})


def past_frames(config: ModelConfig) -> int:
    return sum(w - 1 - w // 2 for w in config.filter_widths)


def conv_lookahead_frames(config: ModelConfig) -> int:
    return sum(w // 2 for w in config.filter_widths)


def lookahead_frames(config: ModelConfig) -> int:
    """Future mel frames needed before frame t can be emitted."""
    return conv_lookahead_frames(config) + config.multistep_W - 1


def latency_ms(config: ModelConfig) -> float:
    half_window_ms = 1000.0 * (N_FFT / 2) / SAMPLE_RATE
    return half_window_ms + 1000.0 * FRAME_SECONDS * conv_lookahead_frames(config)


def stream_latency_samples(config: ModelConfig) -> int:
    """Samples beyond frame t's timestamp that must arrive before a session can emit frame t.

    Unlike ``latency_ms`` this counts the W-1 future frames of the multistep
    window on top of the STFT half window and the conv lookahead.
    """
    return N_FFT // 2 + HOP_LENGTH * lookahead_frames(config)


def stream_latency_ms(config: ModelConfig) -> float:
    return 1000.0 * stream_latency_samples(config) / SAMPLE_RATE


def parse_widths(text: str) -> Tuple[int, ...]:
    parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
    try:
        widths = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse filter widths {text!r}") from exc
    if len(widths) != 6:
        raise ConfigurationError(f"expected 6 filter widths, got {len(widths)}")
    for w in widths:
        if w < 1 or w % 2 == 0:
            raise ConfigurationError(f"filter widths must be odd and positive, got {widths}")
    return widths


def compact_config(name: str, **overrides) -> ModelConfig:
    if name not in COMPACT_LADDER:
        raise ConfigurationError(f"unknown compact size {name!r}")
    cnn, rnn, hidden = COMPACT_LADDER[name]
    fields = dict(variant="Compact", conv_channels=cnn, lstm_units=rnn, hidden_per_pitch=hidden)
    fields.update(overrides)
    return ModelConfig(**fields)


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale configuration used for smoke training and tests."""
    fields = dict(
        variant="Compact",
        conv_channels=4,
        fc_units=32,
        hidden_per_pitch=8,
        lstm_units=12,
        lstm_layers=1,
        film_hidden=8,
        context_hidden=8,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


class TrainConfig(BaseModel):
    dataset_dir: str
    output_dir: str = "runs/train"
    model: ModelConfig = Field(default_factory=tiny_config)
    crop_seconds: float = Field(default=10.0, gt=0)
    batch_size: int = Field(default=4, ge=1)
    lr: float = Field(default=1e-3, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_iters: int = Field(default=500, ge=0)
    validate_every: int = Field(default=100, ge=1)
    max_valid_pieces: Optional[int] = None
    seed: int = 0
    focal_alpha: float = 1.0
    focal_gamma: float = 2.0

    @model_validator(mode="after")
    def _crop_covers_window(self):
        need = self.model.multistep_W + lookahead_frames(self.model)
        if self.crop_frames < need:
            raise ConfigurationError(
                f"crop of {self.crop_frames} frames is shorter than the {need}-frame model window"
            )
        return self

    @property
    def crop_frames(self) -> int:
        return int(math.floor(self.crop_seconds * FPS))


class SynthSpec(BaseModel):
    seed: int = 0
    n_pieces: int = Field(default=50, ge=0)
    piece_seconds: float = Field(default=10.0, gt=0)
    max_polyphony: int = Field(default=3, ge=1)
    pitch_range: Tuple[int, int] = (MIN_MIDI, MAX_MIDI)
    note_rate: float = Field(default=2.0, ge=0)
    pedal_prob: float = Field(default=0.3, ge=0, le=1)
    partials: int = Field(default=8, ge=1)
    decay_base: float = 2.0  # seconds at MIDI 21
    decay_halving: float = 44.0  # semitones per halving of the decay constant
    attack: float = 0.005
    release: float = 0.02
    velocity_range: Tuple[int, int] = (20, 110)
    duration_range: Tuple[float, float] = (0.1, 4.0)
    min_gap: float = 2 * FRAME_SECONDS
    valid_fraction: float = 0.1
    test_fraction: float = 0.1

    @field_validator("pitch_range")
    @classmethod
    def _pitch_range(cls, v):
        lo, hi = v
        if not (MIN_MIDI <= lo <= hi <= MAX_MIDI):
            raise ConfigurationError(f"pitch range {v} outside [{MIN_MIDI}, {MAX_MIDI}]")
        return v


class RuntimeSettings(BaseModel):
    threads: int = Field(default=1, ge=1)

    @classmethod
    def from_env(cls) -> "RuntimeSettings":
        raw = os.environ.get("PARPIANO_THREADS", "").strip()
        if not raw:
            return cls()
        try:
            return cls(threads=int(raw))
        except ValueError as exc:
            raise ConfigurationError(f"PARPIANO_THREADS must be a positive integer, got {raw!r}") from exc
