"""PAR and PAR-compact networks.

Both variants share the Conv-FiLM front end and the pitchwise sequence
module; they differ in where the feature map is split into 88 pitches.
Tensors here are batched as [B,1,700,T] in and [B,T,88,...] out.
"""
import logging
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from . import tensor as T
from .codec import RecursiveContext, advance_context
from .config import ModelConfig, latency_ms, lookahead_frames, past_frames  # noqa: F401
from .errors import ConfigurationError, ShapeError, StateError
from .layers import FiLM, Conv2d, Linear, LSTMStack, MLP, Module
from .models import MAX_DURATION_FRAMES, N_MELS, N_PITCHES, N_STATES
from .tensor import Tensor

logger = logging.getLogger(__name__)

POOL_AFTER = (1, 3)  # conv indices followed by a frequency max-pool
CONV_FREQ_KERNEL = 3
ACOUSTIC_BINS = N_MELS // 4

INIT_RECIPE = {
    "rng": "numpy.random.default_rng(seed)",
    "weights": "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))",
    "lstm_forget_bias": 1.0,
    "film_gamma_bias": 1.0,
    "film_beta_bias": 0.0,
}


def multistep_window(x: Tensor, width: int) -> Tensor:
    """[B,T,88,D] -> [B,T,88,width*D]: frames t..t+width-1, zeros past the end."""
    n_time = x.shape[1]
    padded = T.pad(x, [(0, 0), (0, width - 1), (0, 0), (0, 0)])
    return T.concat([padded[:, k:k + n_time] for k in range(width)], axis=-1)


# ------------------------------
# Acoustic model
# ------------------------------

class ParHead(Module):
    """Timewise FC to fc_units, FC to 88*H, then the shared per-pitch multistep FC."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype):
        hidden = config.hidden_per_pitch
        self.frame_width = hidden
        self.fc = Linear(config.conv_channels * ACOUSTIC_BINS, config.fc_units, rng, dtype)
        self.pitch_fc = Linear(config.fc_units, N_PITCHES * hidden, rng, dtype)
        self.multistep = Linear(config.multistep_W * hidden, hidden, rng, dtype)

    def frame_features(self, feat: Tensor) -> Tensor:
        n_batch, channels, n_freq, n_time = feat.shape
        x = feat.transpose(0, 3, 1, 2).reshape(n_batch, n_time, channels * n_freq)
        x = T.relu(self.fc(x))
        return self.pitch_fc(x).reshape(n_batch, n_time, N_PITCHES, -1)

    def per_pitch(self, window: Tensor) -> Tensor:
        return self.multistep(window)


class CompactHead(Module):
    """Two 1x1 convs down to one channel, 88 two-bin segments, shared per-pitch FCs."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype):
        channels, hidden = config.conv_channels, config.hidden_per_pitch
        self.frame_width = 2
        self.squeeze = Conv2d(channels, channels, 1, 1, rng, dtype)
        self.collapse = Conv2d(channels, 1, 1, 1, rng, dtype)
        self.multistep = Linear(2 * config.multistep_W, hidden, rng, dtype)
        self.fc = Linear(hidden, hidden, rng, dtype)

    def frame_features(self, feat: Tensor) -> Tensor:
        x = self.collapse(T.relu(self.squeeze(feat)))
        n_batch, _, n_freq, n_time = x.shape
        x = T.pad(x, [(0, 0), (0, 0), (0, 2 * N_PITCHES - n_freq), (0, 0)])
        return x.reshape(n_batch, N_PITCHES, 2, n_time).transpose(0, 3, 1, 2)

    def per_pitch(self, window: Tensor) -> Tensor:
        return self.fc(T.relu(self.multistep(window)))


class AcousticStack(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype):
        channels = config.conv_channels
        self.variant = config.variant
        self.multistep_W = config.multistep_W
        self.convs = [
            Conv2d(1 if i == 0 else channels, channels, CONV_FREQ_KERNEL, width, rng, dtype)
            for i, width in enumerate(config.filter_widths)
        ]
        self.films = []
        if not config.ablations.no_film:
            self.films = [
                FiLM(channels, config.film_hidden, config.film_layers, rng, dtype) for _ in self.convs
            ]
        head_cls = ParHead if config.variant == "PAR" else CompactHead
        self.head = head_cls(config, rng, dtype)

    def conv_features(self, mel: Tensor) -> Tensor:
        x = mel
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if self.films:
                x = self.films[i](x)
            x = T.relu(x)
            if i in POOL_AFTER:
                x = T.maxpool_freq2(x)
        return x

    def __call__(self, mel: Tensor) -> Tensor:
        frames = self.head.frame_features(self.conv_features(mel))
        return self.head.per_pitch(multistep_window(frames, self.multistep_W))


def _acoustic_forward(stack: AcousticStack, mel_window, variant: str) -> Tensor:
    if stack.variant != variant:
        raise ConfigurationError(f"stack is {stack.variant}, not {variant}")
    x = mel_window if isinstance(mel_window, Tensor) else Tensor(np.asarray(mel_window))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.shape[-1] < stack.multistep_W:
        raise ShapeError(f"need at least {stack.multistep_W} frames, got {x.shape[-1]}")
    out = stack(x)  # [1,T,88,H]
    return out[0].transpose(1, 2, 0)


def acoustic_forward_par(stack: AcousticStack, mel_window) -> Tensor:
    """[1,700,T] log-mel -> [88,H,T] per-pitch features."""
    return _acoustic_forward(stack, mel_window, "PAR")


def acoustic_forward_compact(stack: AcousticStack, mel_window) -> Tensor:
    return _acoustic_forward(stack, mel_window, "Compact")


# ------------------------------
# Sequence model
# ------------------------------

def context_features(states, duration, velocity, simple: bool = False) -> np.ndarray:
    """One-hot state, clamped and scaled duration, velocity; stacked on a new last axis."""
    onehot = np.eye(N_STATES)[np.asarray(states, dtype=np.int64)]
    if simple:
        return onehot
    dur = np.minimum(np.asarray(duration, dtype=np.float64), MAX_DURATION_FRAMES) / MAX_DURATION_FRAMES
    vel = np.asarray(velocity, dtype=np.float64)
    return np.concatenate([onehot, dur[..., None], vel[..., None]], axis=-1)


class ContextEncoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype):
        self.simple = config.ablations.simple_context
        self.disabled = config.ablations.non_autoregressive
        self.context_dim = config.context_dim
        n_in = N_STATES if self.simple else N_STATES + 2
        hidden = config.context_hidden
        self.mlp = MLP([n_in, hidden, hidden, config.context_dim], rng, dtype)
        self._dtype = dtype

    def __call__(self, states, duration, velocity) -> Tensor:
        shape = np.shape(states)
        if self.disabled:
            return Tensor(np.zeros(shape + (self.context_dim,), dtype=self._dtype))
        feats = context_features(states, duration, velocity, self.simple).astype(self._dtype)
        return self.mlp(Tensor(feats))


def context_encode(model: "ParModel", ctx: RecursiveContext) -> Tensor:
    """[88, context_dim] embedding of a per-pitch context."""
    return model.context(ctx.states, ctx.duration, ctx.velocity)


class NoteSequencer(Module):
    """Pitchwise LSTM with a 5-way softmax head, or one wide LSTM across all pitches."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype):
        n_in = config.hidden_per_pitch + config.context_dim
        self.global_lstm = config.ablations.global_lstm
        if self.global_lstm:
            self.lstm = LSTMStack(N_PITCHES * n_in, config.global_lstm_units, 1, rng, dtype)
            self.head = Linear(config.global_lstm_units, N_PITCHES * N_STATES, rng, dtype)
        else:
            self.lstm = LSTMStack(n_in, config.lstm_units, config.lstm_layers, rng, dtype)
            self.head = Linear(config.lstm_units, N_STATES, rng, dtype)

    @property
    def n_rows(self) -> int:
        return 1 if self.global_lstm else N_PITCHES

    def step(self, x: Tensor, hs, cs):
        rows = x.reshape(1, -1) if self.global_lstm else x
        h, hs, cs = self.lstm.step(rows, hs, cs)
        return T.softmax(self.head(h).reshape(N_PITCHES, N_STATES)), hs, cs

    def sequence(self, x: Tensor) -> Tensor:
        n_batch, n_time, _, width = x.shape
        if self.global_lstm:
            rows = x.reshape(n_batch, n_time, -1).transpose(1, 0, 2)
        else:
            rows = x.transpose(1, 0, 2, 3).reshape(n_time, n_batch * N_PITCHES, width)
        logits = self.head(self.lstm.sequence(rows))
        logits = logits.reshape(n_time, n_batch, N_PITCHES, N_STATES).transpose(1, 0, 2, 3)
        return T.softmax(logits)


class VelocitySequencer(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype):
        self.lstm = LSTMStack(2 * config.hidden_per_pitch, config.lstm_units, config.lstm_layers, rng, dtype)
        self.head = Linear(config.lstm_units, 1, rng, dtype)

    def step(self, x: Tensor, hs, cs):
        h, hs, cs = self.lstm.step(x, hs, cs)
        return T.sigmoid(self.head(h)).reshape(N_PITCHES), hs, cs

    def sequence(self, x: Tensor) -> Tensor:
        n_batch, n_time, _, width = x.shape
        rows = x.transpose(1, 0, 2, 3).reshape(n_time, n_batch * N_PITCHES, width)
        out = T.sigmoid(self.head(self.lstm.sequence(rows)))
        return out.reshape(n_time, n_batch, N_PITCHES).transpose(1, 0, 2)


# ------------------------------
# Model
# ------------------------------

class ModelState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    note_h: List[np.ndarray]
    note_c: List[np.ndarray]
    velocity_h: List[np.ndarray]
    velocity_c: List[np.ndarray]
    context: RecursiveContext
    frame_index: int = 0


class FrameOutput(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    state_probs: np.ndarray  # [88, 5]
    velocity: np.ndarray  # [88]

    @property
    def states(self) -> np.ndarray:
        return self.state_probs.argmax(axis=-1)


class OfflineDecode(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    states: np.ndarray  # [T, 88]
    velocity: np.ndarray  # [T, 88]
    state_probs: np.ndarray  # [T, 88, 5]


class ParModel(Module):
    """Note branch (acoustic stack, context encoder, 5-state sequencer) plus velocity branch."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.dtype = np.dtype(dtype)
        self.note_acoustic = AcousticStack(config, rng, dtype)
        self.context = ContextEncoder(config, rng, dtype)
        self.note_seq = NoteSequencer(config, rng, dtype)
        self.velocity_acoustic = AcousticStack(config, rng, dtype)
        self.velocity_seq = VelocitySequencer(config, rng, dtype)
        self.assign_names()

    def note_branch_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("velocity_")]

    def forward_teacher_forced(
        self,
        mel: np.ndarray,
        context: Dict[str, np.ndarray],
        context_hook: Optional[Callable[[int, Dict[str, np.ndarray]], None]] = None,
    ) -> Tuple[Tensor, Tensor]:
        """Differentiable pass over a batch of crops.

        mel is [B,700,T]; context holds the previous-frame ``states``,
        ``duration`` and ``velocity`` arrays, each [B,T,88]. Returns state
        probabilities [B,T,88,5] and velocities [B,T,88].
        """
        mel = np.asarray(mel)
        if mel.ndim == 3:
            mel = mel[:, None]
        x = Tensor(mel.astype(self.dtype))
        note_feat = self.note_acoustic(x)
        velocity_feat = self.velocity_acoustic(x)

        if context_hook is not None:
            for t in range(mel.shape[-1]):
                context_hook(t, {k: v[:, t] for k, v in context.items()})
        emb = self.context(context["states"], context["duration"], context["velocity"])

        probs = self.note_seq.sequence(T.concat([note_feat, emb], axis=-1))
        velocity = self.velocity_seq.sequence(T.concat([T.stop_gradient(note_feat), velocity_feat], axis=-1))
        return probs, velocity

    def acoustic_features(self, mel: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Full-sequence [T,88,H] features of both branches for one [700,T] piece."""
        x = Tensor(np.asarray(mel, dtype=self.dtype)[None, None])
        with T.no_grad():
            return self.note_acoustic(x).data[0], self.velocity_acoustic(x).data[0]

    def decode_offline(self, mel: np.ndarray) -> OfflineDecode:
        note_feat, velocity_feat = self.acoustic_features(mel)
        state = initial_state(self)
        probs, vels = [], []
        for t in range(note_feat.shape[0]):
            out, state = recurrent_step(self, note_feat[t], velocity_feat[t], state)
            probs.append(out.state_probs)
            vels.append(out.velocity)
        probs = np.stack(probs) if probs else np.zeros((0, N_PITCHES, N_STATES), dtype=self.dtype)
        vels = np.stack(vels) if vels else np.zeros((0, N_PITCHES), dtype=self.dtype)
        return OfflineDecode(states=probs.argmax(axis=-1), velocity=vels, state_probs=probs)


def initial_state(model: ParModel) -> ModelState:
    def zeros(n_rows: int, stack: LSTMStack) -> List[np.ndarray]:
        return [np.zeros((n_rows, stack.n_hidden), dtype=model.dtype) for _ in stack.cells]

    return ModelState(
        note_h=zeros(model.note_seq.n_rows, model.note_seq.lstm),
        note_c=zeros(model.note_seq.n_rows, model.note_seq.lstm),
        velocity_h=zeros(N_PITCHES, model.velocity_seq.lstm),
        velocity_c=zeros(N_PITCHES, model.velocity_seq.lstm),
        context=RecursiveContext.off(),
    )


def recurrent_step(
    model: ParModel,
    note_feature: np.ndarray,
    velocity_feature: np.ndarray,
    state: Optional[ModelState],
    context: Optional[RecursiveContext] = None,
) -> Tuple[FrameOutput, ModelState]:
    """Advance the sequence module by one frame from [88,H] acoustic features.

    ``context`` overrides the state's own context (teacher forcing).
    """
    if not isinstance(state, ModelState):
        raise StateError("model state is not initialised; use initial_state(model)")
    ctx = state.context if context is None else context
    wrap = lambda arrays: [Tensor(a) for a in arrays]  # noqa: E731
    note_feature = Tensor(np.asarray(note_feature, dtype=model.dtype))
    velocity_feature = Tensor(np.asarray(velocity_feature, dtype=model.dtype))

    with T.no_grad():
        note_in = T.concat([note_feature, context_encode(model, ctx)], axis=-1)
        probs, note_h, note_c = model.note_seq.step(note_in, wrap(state.note_h), wrap(state.note_c))
        velocity_in = T.concat([note_feature, velocity_feature], axis=-1)
        velocity, velocity_h, velocity_c = model.velocity_seq.step(
            velocity_in, wrap(state.velocity_h), wrap(state.velocity_c)
        )

    out = FrameOutput(state_probs=probs.data, velocity=velocity.data)
    next_state = ModelState(
        note_h=[h.data for h in note_h],
        note_c=[c.data for c in note_c],
        velocity_h=[h.data for h in velocity_h],
        velocity_c=[c.data for c in velocity_c],
        context=advance_context(ctx, out.states, out.velocity),
        frame_index=state.frame_index + 1,
    )
    return out, next_state


def sequence_window(config: ModelConfig) -> int:
    return past_frames(config) + lookahead_frames(config) + 1


def sequence_step(
    model: ParModel,
    mel_window: np.ndarray,
    state: Optional[ModelState],
    context: Optional[RecursiveContext] = None,
) -> Tuple[FrameOutput, ModelState]:
    """One prediction from a [700, past + lookahead + 1] window centred on the target frame."""
    if not isinstance(state, ModelState):
        raise StateError("model state is not initialised; use initial_state(model)")
    mel_window = np.asarray(mel_window)
    if mel_window.ndim == 3:
        mel_window = mel_window[0]
    need = sequence_window(model.config)
    if mel_window.shape != (N_MELS, need):
        raise ShapeError(f"mel window must be ({N_MELS}, {need}), got {mel_window.shape}")
    note_feat, velocity_feat = model.acoustic_features(mel_window)
    target = past_frames(model.config)
    return recurrent_step(model, note_feat[target], velocity_feat[target], state, context)


def count_params(target: Union[ModelConfig, Module]) -> int:
    """Scalar parameter count of a module, or of the model a config describes."""
    module = ParModel(target) if isinstance(target, ModelConfig) else target
    return int(sum(p.size for p in module.parameters()))
