import numpy as np
import pytest

from parpiano.codec import (
    NoteTracker,
    RecursiveContext,
    advance_context,
    decode,
    elongate_with_pedal,
    encode,
    events_to_notes,
    velocity_to_midi,
)
from parpiano.models import FPS, MAX_DURATION_FRAMES, MIN_MIDI, N_PITCHES, NoteEvent, NoteState, PedalEvent

OFF, ONSET, REONSET, SUSTAIN, OFFSET = (int(s) for s in NoteState)
FRAME = 1.0 / FPS


def _row(roll, pitch):
    return roll.states[:, pitch - MIN_MIDI].tolist()


def _states(frames, pitch_index=0):
    out = np.zeros((len(frames), N_PITCHES), dtype=np.int64)
    out[:, pitch_index] = frames
    return out


# ---------------------------------------------------------------------------
# Pedal
# ---------------------------------------------------------------------------


class TestPedal:
    def test_held_pedal_extends_to_release(self):
        note = NoteEvent(pitch=60, onset=0.5, offset=1.0, velocity=70)
        pedals = [PedalEvent(time=0.4, value=100), PedalEvent(time=2.0, value=0)]
        assert elongate_with_pedal([note], pedals)[0].offset == 2.0

    def test_pedal_below_threshold_changes_nothing(self):
        notes = [NoteEvent(pitch=60, onset=0.5, offset=1.0, velocity=70)]
        pedals = [PedalEvent(time=0.1, value=40), PedalEvent(time=0.9, value=63)]
        assert elongate_with_pedal(notes, pedals) == notes

    def test_restrike_truncates(self):
        notes = [
            NoteEvent(pitch=60, onset=0.5, offset=1.0, velocity=70),
            NoteEvent(pitch=60, onset=1.5, offset=1.8, velocity=50),
        ]
        pedals = [PedalEvent(time=0.4, value=100), PedalEvent(time=3.0, value=0)]
        out = elongate_with_pedal(notes, pedals)
        assert out[0].offset == 1.5
        assert out[1].offset == 3.0

    def test_threshold_is_configurable(self):
        note = NoteEvent(pitch=60, onset=0.5, offset=1.0, velocity=70)
        pedals = [PedalEvent(time=0.4, value=30), PedalEvent(time=2.0, value=0)]
        assert elongate_with_pedal([note], pedals)[0].offset == 1.0
        assert elongate_with_pedal([note], pedals, threshold=21)[0].offset == 2.0

    def test_never_released_runs_to_end(self):
        note = NoteEvent(pitch=60, onset=0.5, offset=1.0, velocity=70)
        out = elongate_with_pedal([note], [PedalEvent(time=0.2, value=127)], end_time=4.0)
        assert out[0].offset == 4.0


# ---------------------------------------------------------------------------
# Encode
# ---------------------------------------------------------------------------


class TestEncode:
    def test_single_note_frames(self):
        roll = encode([NoteEvent(pitch=60, onset=0.032, offset=0.160, velocity=64)], 8)
        assert _row(roll, 60) == [OFF, ONSET, SUSTAIN, SUSTAIN, OFFSET, OFF, OFF, OFF]
        assert _row(roll, 61) == [OFF] * 8

    def test_empty(self):
        roll = encode([], 10)
        assert roll.states.shape == (10, N_PITCHES)
        assert not roll.states.any() and not roll.onset_mask.any()
        assert not roll.duration_ctx.any() and not roll.velocity_ctx.any()

    def test_restrike_while_sounding(self):
        notes = [
            NoteEvent(pitch=60, onset=0.032, offset=0.320, velocity=90),
            NoteEvent(pitch=60, onset=0.128, offset=0.500, velocity=30),
        ]
        row = _row(encode(notes, 20), 60)
        assert row[:6] == [OFF, ONSET, SUSTAIN, SUSTAIN, REONSET, SUSTAIN]
        assert OFFSET not in row[:15]
        assert row[15] == OFFSET

    def test_short_note_gets_onset_then_offset(self):
        roll = encode([NoteEvent(pitch=40, onset=0.070, offset=0.075, velocity=10)], 5)
        assert _row(roll, 40) == [OFF, OFF, ONSET, OFFSET, OFF]

    def test_contexts(self):
        notes = [NoteEvent(pitch=60, onset=0.0, offset=0.3, velocity=127)]
        roll = encode(notes, 12)
        p = 60 - MIN_MIDI
        sounding = roll.states[:, p] != OFF
        np.testing.assert_array_equal(roll.onset_mask, np.isin(roll.states, (ONSET, REONSET)))
        assert roll.duration_ctx[:, p].tolist()[:11] == list(range(1, 11)) + [0]
        np.testing.assert_allclose(roll.velocity_ctx[sounding, p], 1.0)
        assert not roll.velocity_ctx[~sounding, p].any()

    def test_duration_clamps(self):
        roll = encode([NoteEvent(pitch=30, onset=0.0, offset=8.0, velocity=50)], 260)
        assert roll.duration_ctx[:, 30 - MIN_MIDI].max() == MAX_DURATION_FRAMES

    def test_notes_past_the_roll_are_dropped(self):
        roll = encode([NoteEvent(pitch=60, onset=1.0, offset=2.0, velocity=50)], 10)
        assert not roll.states.any()

    def test_previous_context_and_crop(self):
        roll = encode([NoteEvent(pitch=60, onset=0.032, offset=0.160, velocity=64)], 8)
        prev = roll.previous_context()
        assert prev["states"][0].sum() == 0
        np.testing.assert_array_equal(prev["states"][1:], roll.states[:-1])
        crop = roll.crop(6, 5)
        assert crop.n_frames == 5
        np.testing.assert_array_equal(crop.states[:2], roll.states[6:8])
        assert not crop.states[2:].any()


# ---------------------------------------------------------------------------
# Context
# ---------------------------------------------------------------------------


class TestContext:
    def test_advance_rules(self):
        prev = RecursiveContext.off(4)
        prev.states[:] = [SUSTAIN, OFF, ONSET, SUSTAIN]
        prev.duration[:] = [5, 0, 1, MAX_DURATION_FRAMES]
        prev.velocity[:] = [0.5, 0.0, 0.7, 0.2]
        nxt = advance_context(prev, np.array([SUSTAIN, SUSTAIN, REONSET, OFFSET]), np.array([0.9, 0.9, 0.3, 0.9]))
        assert nxt.duration.tolist() == [6, 0, 1, MAX_DURATION_FRAMES]
        np.testing.assert_allclose(nxt.velocity, [0.5, 0.0, 0.3, 0.2])

    def test_off_clears(self):
        prev = RecursiveContext.off(2)
        prev.states[:] = SUSTAIN
        prev.duration[:] = 3
        nxt = advance_context(prev, np.array([OFF, OFF]), np.ones(2))
        assert nxt.equals(RecursiveContext.off(2))


# ---------------------------------------------------------------------------
# Decode
# ---------------------------------------------------------------------------


class TestDecode:
    def test_all_off(self):
        assert decode(np.zeros((20, N_PITCHES), dtype=np.int64), np.zeros((20, N_PITCHES))) == []

    def test_encode_example_roundtrip(self):
        roll = encode([NoteEvent(pitch=60, onset=0.032, offset=0.160, velocity=64)], 8)
        (note,) = decode(roll.states, roll.velocity_ctx)
        assert note.pitch == 60 and note.velocity == 64
        assert note.onset == pytest.approx(0.032)
        assert 0.128 - 1e-9 <= note.offset <= 0.160 + 1e-9

    def test_reonset_splits(self):
        states = _states([ONSET, SUSTAIN, REONSET, SUSTAIN, OFFSET])
        velocity = np.zeros(states.shape)
        velocity[0, 0], velocity[2, 0] = 0.5, 0.25
        first, second = decode(states, velocity)
        assert (first.onset, first.offset) == pytest.approx((0.0, 2 * FRAME))
        assert (second.onset, second.offset) == pytest.approx((2 * FRAME, 4 * FRAME))
        assert (first.velocity, second.velocity) == (64, 32)

    def test_isolated_sustain_ignored(self):
        assert decode(_states([OFF, SUSTAIN, SUSTAIN, OFFSET, OFF]), np.zeros((5, N_PITCHES))) == []

    def test_dangling_note_closes_at_the_end(self):
        (note,) = decode(_states([OFF, ONSET, SUSTAIN, SUSTAIN]), np.full((4, N_PITCHES), 0.5))
        assert note.offset == pytest.approx(4 * FRAME)

    def test_velocity_is_clamped(self):
        assert velocity_to_midi(0.0) == 1
        assert velocity_to_midi(1.5) == 127
        assert velocity_to_midi(64 / 127) == 64

    def test_tracker_events(self):
        tracker = NoteTracker()
        events = []
        for frame in ([ONSET], [SUSTAIN], [SUSTAIN]):
            events += tracker.step(_states(frame)[0], np.full(N_PITCHES, 0.5))
        assert [e.kind for e in events] == ["note_on"]
        closing = tracker.finish()
        assert [(e.kind, e.frame) for e in closing] == [("note_off", 3)]
        assert tracker.finish() == []
        assert events_to_notes(events + closing) == tracker.notes

    @pytest.mark.parametrize("seed", range(100))
    def test_roundtrip_random_scores(self, seed):
        rng = np.random.default_rng(seed)
        notes = []
        for pitch in rng.choice(np.arange(MIN_MIDI, MIN_MIDI + N_PITCHES), size=int(rng.integers(1, 8)), replace=False):
            t = float(rng.uniform(0.0, 0.5))
            for _ in range(int(rng.integers(1, 4))):
                duration = float(rng.uniform(0.01, 1.0))
                notes.append(NoteEvent(pitch=int(pitch), onset=t, offset=t + duration, velocity=int(rng.integers(1, 128))))
                t += duration + float(rng.uniform(2.5 * FRAME, 0.5))
        n_frames = int(np.ceil(max(n.offset for n in notes) * FPS)) + 2
        roll = encode(notes, n_frames)
        decoded = decode(roll.states, roll.velocity_ctx)

        key = lambda n: (n.pitch, n.onset)  # noqa: E731
        assert len(decoded) == len(notes)
        for ref, est in zip(sorted(notes, key=key), sorted(decoded, key=key)):
            assert ref.pitch == est.pitch
            assert ref.velocity == est.velocity
            assert abs(ref.onset - est.onset) <= FRAME + 1e-9
            assert abs(ref.offset - est.offset) <= FRAME + 1e-9
