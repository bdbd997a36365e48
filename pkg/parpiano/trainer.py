"""Teacher-forced training, autoregressive validation and experiment suites."""
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from . import tensor as T
from .bus import CHANNEL_TRAIN, CHANNEL_VALID, EventBus
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import StateRoll, decode, encode
from .config import ABLATIONS, COMPACT_LADDER, TrainConfig, compact_config
from .dsp import log_mel_matrix
from .errors import DataError, TrainingDivergedError
from .metrics import compute_metrics, macro_average
from .models import LOG_EPS, NoteEvent, NoteMetrics, NoteState
from .network import ParModel, count_params
from .optim import Adam
from .synth import PieceEntry, load_manifest, load_piece

logger = logging.getLogger(__name__)

SILENT_MEL = float(np.log(LOG_EPS))
CRITERION = "with_offset_f1"


class PieceData(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str
    mel: np.ndarray  # [700, T]
    roll: StateRoll
    notes: List[NoteEvent]

    @property
    def n_frames(self) -> int:
        return self.mel.shape[1]


class Batch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mel: np.ndarray  # [B, 700, L]
    states: np.ndarray  # [B, L, 88] targets
    velocity: np.ndarray  # [B, L, 88] targets
    onset_mask: np.ndarray  # [B, L, 88]
    context: Dict[str, np.ndarray]  # previous-frame ground truth, each [B, L, 88]
    starts: List[int]
    pieces: List[str]


class ValidationRecord(BaseModel):
    iteration: int
    onset_f1: float
    with_offset_f1: float
    checkpoint: Optional[str] = None


class TrainReport(BaseModel):
    config: TrainConfig
    losses: List[float] = Field(default_factory=list)
    validation: List[ValidationRecord] = Field(default_factory=list)
    best_checkpoint: Optional[str] = None
    best_iteration: Optional[int] = None
    criterion: str = CRITERION


def prepare_piece(name: str, samples: np.ndarray, notes: List[NoteEvent]) -> PieceData:
    mel = log_mel_matrix(samples)
    return PieceData(name=name, mel=mel, roll=encode(notes, mel.shape[1]), notes=notes)


def load_split(dataset_dir: str, split: str, limit: Optional[int] = None) -> List[PieceData]:
    manifest = load_manifest(dataset_dir)
    entries: List[PieceEntry] = manifest.split(split)
    if limit is not None:
        entries = entries[:limit]
    pieces = []
    for entry in entries:
        audio, notes = load_piece(dataset_dir, entry)
        pieces.append(prepare_piece(entry.name, audio.samples, notes))
    return pieces


def _crop(arr: np.ndarray, start: int, length: int, axis: int, fill) -> np.ndarray:
    shape = list(arr.shape)
    shape[axis] = length
    out = np.full(shape, fill, dtype=arr.dtype)
    chunk = np.take(arr, np.arange(start, min(start + length, arr.shape[axis])), axis=axis)
    index = [slice(None)] * arr.ndim
    index[axis] = slice(0, chunk.shape[axis])
    out[tuple(index)] = chunk
    return out


def make_batch(pieces: Sequence[PieceData], rng: np.random.Generator, crop_frames: int, batch_size: int) -> Batch:
    """Random crops; the context at each frame is the ground-truth roll one frame earlier."""
    chosen = rng.integers(0, len(pieces), size=batch_size)
    mels, states, vels, masks, starts, names = [], [], [], [], [], []
    ctx: Dict[str, list] = {"states": [], "duration": [], "velocity": []}
    for k in chosen:
        piece = pieces[int(k)]
        start = int(rng.integers(0, max(0, piece.n_frames - crop_frames) + 1))
        roll = piece.roll.crop(start, crop_frames)
        previous = piece.roll.previous_context()
        mels.append(_crop(piece.mel, start, crop_frames, axis=1, fill=SILENT_MEL))
        states.append(roll.states)
        vels.append(roll.velocity_ctx)
        masks.append(roll.onset_mask)
        ctx["states"].append(_crop(previous["states"], start, crop_frames, 0, NoteState.OFF))
        ctx["duration"].append(_crop(previous["duration"], start, crop_frames, 0, 0))
        ctx["velocity"].append(_crop(previous["velocity"], start, crop_frames, 0, 0.0))
        starts.append(start)
        names.append(piece.name)
    return Batch(
        mel=np.stack(mels),
        states=np.stack(states),
        velocity=np.stack(vels),
        onset_mask=np.stack(masks),
        context={k: np.stack(v) for k, v in ctx.items()},
        starts=starts,
        pieces=names,
    )


def batch_loss(model: ParModel, batch: Batch, alpha: float = 1.0, gamma: float = 2.0, context_hook=None):
    """(total, focal, velocity) losses as Tensors."""
    probs, velocity = model.forward_teacher_forced(batch.mel, batch.context, context_hook=context_hook)
    focal = T.focal_loss(probs, batch.states, alpha=alpha, gamma=gamma)
    vel = T.masked_l2(velocity, batch.velocity.astype(model.dtype), batch.onset_mask)
    return focal + vel, focal, vel


def transcribe_piece(model: ParModel, piece: PieceData) -> List[NoteEvent]:
    """Autoregressive decoding: the model feeds on its own predicted context."""
    out = model.decode_offline(piece.mel)
    return decode(out.states, out.velocity)


def evaluate_model(model: ParModel, pieces: Sequence[PieceData]) -> Dict[str, NoteMetrics]:
    return {p.name: compute_metrics(p.notes, transcribe_piece(model, p)) for p in pieces}


def select_best(validation: Sequence[ValidationRecord]) -> Optional[ValidationRecord]:
    """Highest with-offset F1; the earliest record wins ties."""
    best = None
    for record in validation:
        if best is None or record.with_offset_f1 > best.with_offset_f1:
            best = record
    return best


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        bus: Optional[EventBus] = None,
        context_hook: Optional[Callable] = None,
        progress: bool = True,
    ):
        self.config = config
        self.bus = bus or EventBus()
        self.context_hook = context_hook
        self.progress = progress
        self.model = ParModel(config.model)
        self.optimizer = Adam(self.model.parameters(), lr=config.lr, betas=config.betas, eps=config.eps)
        self.rng = np.random.default_rng(config.seed)
        self.report = TrainReport(config=config)

    def _dump_divergence(self, iteration: int, batch: Batch) -> str:
        os.makedirs(self.config.output_dir, exist_ok=True)
        path = os.path.join(self.config.output_dir, f"diverged_iter{iteration:06d}.npz")
        np.savez(path, mel=batch.mel, states=batch.states, velocity=batch.velocity, starts=np.array(batch.starts))
        return path

    def step(self, iteration: int, batch: Batch) -> float:
        self.optimizer.zero_grad()
        total, focal, vel = batch_loss(
            self.model, batch, self.config.focal_alpha, self.config.focal_gamma, self.context_hook
        )
        loss = total.item()
        if not np.isfinite(loss):
            path = self._dump_divergence(iteration, batch)
            raise TrainingDivergedError(f"loss became {loss} at iteration {iteration}", dump_path=path)
        total.backward()
        self.optimizer.step()
        self.bus.emit(CHANNEL_TRAIN, iteration, "step", loss=loss, focal=focal.item(), velocity=vel.item())
        logger.debug("iter %d loss %.5f (focal %.5f, velocity %.5f)", iteration, loss, focal.item(), vel.item())
        return loss

    def validate(self, iteration: int, pieces: Sequence[PieceData]) -> ValidationRecord:
        scores = macro_average(evaluate_model(self.model, pieces)) or {}
        path = os.path.join(self.config.output_dir, f"ckpt_iter{iteration:06d}.ckpt")
        save_checkpoint(self.model, path)
        record = ValidationRecord(
            iteration=iteration,
            onset_f1=float(scores.get("onset_f1", 0.0)),
            with_offset_f1=float(scores.get("with_offset_f1", 0.0)),
            checkpoint=path,
        )
        self.bus.emit(
            CHANNEL_VALID, iteration, "validate", onset_f1=record.onset_f1, with_offset_f1=record.with_offset_f1
        )
        logger.info(
            "iter %d: valid onset F1 %.4f, with-offset F1 %.4f", iteration, record.onset_f1, record.with_offset_f1
        )
        return record

    def fit(self, train_pieces: Sequence[PieceData], valid_pieces: Sequence[PieceData]) -> TrainReport:
        if not train_pieces:
            raise DataError("training split is empty")
        cfg = self.config
        bar = tqdm(range(1, cfg.max_iters + 1), file=sys.stderr, disable=not self.progress, desc="train")
        for iteration in bar:
            batch = make_batch(train_pieces, self.rng, cfg.crop_frames, cfg.batch_size)
            loss = self.step(iteration, batch)
            self.report.losses.append(loss)
            bar.set_postfix(loss=f"{loss:.4f}")
            if valid_pieces and iteration % cfg.validate_every == 0:
                self.report.validation.append(self.validate(iteration, valid_pieces))
        if valid_pieces and (cfg.max_iters % cfg.validate_every or cfg.max_iters == 0):
            self.report.validation.append(self.validate(cfg.max_iters, valid_pieces))

        best = select_best(self.report.validation)
        if best is not None:
            self.report.best_checkpoint = best.checkpoint
            self.report.best_iteration = best.iteration
        os.makedirs(cfg.output_dir, exist_ok=True)
        with open(os.path.join(cfg.output_dir, "train_report.json"), "w") as f:
            f.write(self.report.model_dump_json(indent=2))
        return self.report

    def best_model(self) -> ParModel:
        if self.report.best_checkpoint:
            return load_checkpoint(self.report.best_checkpoint)
        return self.model


def train(
    config: TrainConfig,
    bus: Optional[EventBus] = None,
    context_hook: Optional[Callable] = None,
    progress: bool = True,
) -> TrainReport:
    train_pieces = load_split(config.dataset_dir, "train")
    valid_pieces = load_split(config.dataset_dir, "valid", config.max_valid_pieces)
    trainer = Trainer(config, bus=bus, context_hook=context_hook, progress=progress)
    logger.info(
        "training %s (%d params) on %d pieces, %d validation pieces",
        config.model.variant,
        count_params(trainer.model),
        len(train_pieces),
        len(valid_pieces),
    )
    return trainer.fit(train_pieces, valid_pieces)


# ------------------------------
# Suites
# ------------------------------

def _suite_row(label: str, trainer: Trainer, test_pieces: Sequence[PieceData]) -> Dict[str, float]:
    scores = macro_average(evaluate_model(trainer.best_model(), test_pieces)) or {}
    return {
        "variant": label,
        "params": count_params(trainer.model),
        "iterations": trainer.config.max_iters,
        "best_iteration": trainer.report.best_iteration,
        **scores,
    }


def _run_variants(base: TrainConfig, variants: Dict[str, TrainConfig], progress: bool) -> pd.DataFrame:
    train_pieces = load_split(base.dataset_dir, "train")
    valid_pieces = load_split(base.dataset_dir, "valid", base.max_valid_pieces)
    test_pieces = load_split(base.dataset_dir, "test")
    rows = []
    for label, cfg in variants.items():
        logger.info("suite variant %s", label)
        trainer = Trainer(cfg, progress=progress)
        trainer.fit(train_pieces, valid_pieces)
        rows.append(_suite_row(label, trainer, test_pieces))
    return pd.DataFrame(rows)


def run_ablation_suite(base: TrainConfig, progress: bool = False) -> pd.DataFrame:
    """Full model and each single ablation under the same seed and iteration count."""
    variants = {"full": base.model_copy(update={"output_dir": os.path.join(base.output_dir, "full")})}
    for name in ABLATIONS:
        variants[name] = base.model_copy(
            update={"model": base.model.with_ablation(name), "output_dir": os.path.join(base.output_dir, name)}
        )
    return _run_variants(base, variants, progress)


def run_size_suite(base: TrainConfig, progress: bool = False) -> pd.DataFrame:
    variants = {}
    for name in COMPACT_LADDER:
        model = compact_config(name, seed=base.model.seed, multistep_W=base.model.multistep_W)
        variants[name] = base.model_copy(
            update={"model": model, "output_dir": os.path.join(base.output_dir, name)}
        )
    return _run_variants(base, variants, progress)
