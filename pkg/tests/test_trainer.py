import json
import os

import numpy as np
import pytest

from parpiano.bus import CHANNEL_TRAIN, CHANNEL_VALID, EventBus
from parpiano.checkpoint import load_checkpoint
from parpiano.config import ABLATIONS, COMPACT_LADDER
from parpiano.errors import DataError, TrainingDivergedError
from parpiano.models import NoteState
from parpiano.trainer import (
    Trainer,
    ValidationRecord,
    evaluate_model,
    load_split,
    make_batch,
    run_ablation_suite,
    run_size_suite,
    select_best,
    train,
)


@pytest.fixture(scope="module")
def train_pieces(dataset_dir):
    return load_split(dataset_dir, "train")


def _record(iteration, f1):
    return ValidationRecord(iteration=iteration, onset_f1=f1, with_offset_f1=f1)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


class TestBatches:
    def test_split_sizes(self, dataset_dir):
        assert len(load_split(dataset_dir, "train")) == 2
        assert len(load_split(dataset_dir, "valid", limit=0)) == 0
        with pytest.raises(DataError):
            load_split(os.path.join(dataset_dir, "missing"), "train")

    def test_shapes(self, train_pieces, train_config):
        length = train_config.crop_frames
        batch = make_batch(train_pieces, np.random.default_rng(0), length, 3)
        assert batch.mel.shape == (3, 700, length)
        assert batch.states.shape == batch.velocity.shape == batch.onset_mask.shape == (3, length, 88)
        assert all(v.shape == (3, length, 88) for v in batch.context.values())
        assert len(batch.starts) == len(batch.pieces) == 3

    def test_context_is_previous_ground_truth_frame(self, train_pieces, train_config):
        batch = make_batch(train_pieces, np.random.default_rng(1), train_config.crop_frames, 4)
        by_name = {p.name: p for p in train_pieces}
        for b, (name, start) in enumerate(zip(batch.pieces, batch.starts)):
            roll = by_name[name].roll
            for t in range(train_config.crop_frames):
                frame = start + t - 1
                expected = roll.states[frame] if frame >= 0 else np.full(88, int(NoteState.OFF))
                np.testing.assert_array_equal(batch.context["states"][b, t], expected)
            np.testing.assert_array_equal(batch.states[b], roll.states[start:start + train_config.crop_frames])

    def test_hook_sees_the_ground_truth_context(self, train_pieces, train_config):
        trainer = Trainer(train_config, progress=False)
        batch = make_batch(train_pieces, np.random.default_rng(2), train_config.crop_frames, 2)
        seen = {}

        def hook(t, ctx):
            seen[t] = ctx["states"].copy()

        trainer.context_hook = hook
        trainer.step(1, batch)
        assert sorted(seen) == list(range(train_config.crop_frames))
        for t, states in seen.items():
            np.testing.assert_array_equal(states, batch.context["states"][:, t])


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


class TestTrainer:
    def test_zero_learning_rate_leaves_parameters(self, train_pieces, train_config):
        trainer = Trainer(train_config.model_copy(update={"lr": 0.0}), progress=False)
        before = {n: p.data.copy() for n, p in trainer.model.named_parameters()}
        trainer.step(1, make_batch(train_pieces, trainer.rng, train_config.crop_frames, 2))
        for name, param in trainer.model.named_parameters():
            np.testing.assert_array_equal(param.data, before[name])

    def test_step_changes_parameters(self, train_pieces, train_config):
        trainer = Trainer(train_config, progress=False)
        before = trainer.model.note_seq.head.weight.data.copy()
        trainer.step(1, make_batch(train_pieces, trainer.rng, train_config.crop_frames, 2))
        assert not np.array_equal(trainer.model.note_seq.head.weight.data, before)

    def test_same_seed_same_losses(self, train_pieces, train_config, tmp_path):
        losses = []
        for k in range(2):
            config = train_config.model_copy(update={"output_dir": str(tmp_path / f"run{k}")})
            losses.append(Trainer(config, progress=False).fit(train_pieces, []).losses)
        assert len(losses[0]) == train_config.max_iters
        assert losses[0] == losses[1]

    def test_empty_training_split(self, train_config):
        with pytest.raises(DataError):
            Trainer(train_config, progress=False).fit([], [])

    def test_divergence_dumps_the_batch(self, train_pieces, train_config):
        trainer = Trainer(train_config, progress=False)
        for param in trainer.model.parameters():
            param.data[...] = np.nan
        batch = make_batch(train_pieces, trainer.rng, train_config.crop_frames, 2)
        with pytest.raises(TrainingDivergedError) as info:
            trainer.step(7, batch)
        assert info.value.dump_path.endswith("diverged_iter000007.npz")
        with np.load(info.value.dump_path) as dump:
            np.testing.assert_array_equal(dump["mel"], batch.mel)

    def test_select_best_prefers_earliest_on_ties(self):
        records = [_record(1, 0.2), _record(2, 0.5), _record(3, 0.5), _record(4, 0.1)]
        assert select_best(records).iteration == 2
        assert select_best([]) is None


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------


class TestEndToEnd:
    def test_train_writes_report_and_checkpoints(self, train_config):
        bus = EventBus()
        report = train(train_config, bus=bus, progress=False)
        assert len(report.losses) == 2
        assert [v.iteration for v in report.validation] == [1, 2]
        assert report.best_iteration in (1, 2)
        assert os.path.exists(report.best_checkpoint)
        assert load_checkpoint(report.best_checkpoint, expected_config=train_config.model).config == train_config.model
        with open(os.path.join(train_config.output_dir, "train_report.json")) as f:
            assert json.load(f)["best_iteration"] == report.best_iteration
        assert len(bus.to_dataframe(CHANNEL_TRAIN)) == 2
        assert len(bus.to_dataframe(CHANNEL_VALID)) == 2

    def test_final_validation_when_iterations_do_not_divide(self, train_pieces, dataset_dir, train_config):
        config = train_config.model_copy(update={"max_iters": 3, "validate_every": 2})
        valid = load_split(dataset_dir, "valid")
        report = Trainer(config, progress=False).fit(train_pieces, valid)
        assert [v.iteration for v in report.validation] == [2, 3]

    def test_evaluate_silent_model(self, silent_model, train_pieces):
        scores = evaluate_model(silent_model, train_pieces)
        assert sorted(scores) == sorted(p.name for p in train_pieces)
        assert all(m.onset.precision == 0.0 for m in scores.values())

    def test_ablation_suite(self, train_config):
        config = train_config.model_copy(update={"max_iters": 1})
        frame = run_ablation_suite(config)
        assert frame["variant"].tolist() == ["full", *ABLATIONS]
        assert {"params", "iterations", "best_iteration", "with_offset_f1"} <= set(frame.columns)
        assert (frame["iterations"] == 1).all()

    @pytest.mark.slow
    def test_size_suite_ladder(self, train_config):
        frame = run_size_suite(train_config.model_copy(update={"max_iters": 1}))
        assert frame["variant"].tolist() == list(COMPACT_LADDER)
        assert frame["params"].is_monotonic_decreasing

    @pytest.mark.slow
    def test_loss_goes_down(self, train_pieces, train_config):
        config = train_config.model_copy(update={"max_iters": 40, "lr": 3e-3})
        losses = Trainer(config, progress=False).fit(train_pieces, []).losses
        assert np.mean(losses[-5:]) < np.mean(losses[:5])
