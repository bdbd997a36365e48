import numpy as np

from parpiano.bus import CHANNEL_STREAM, CHANNEL_TRAIN, EventBus
from parpiano.optim import Adam
from parpiano.tensor import Parameter


class TestEventBus:
    def test_channels_are_separate(self):
        bus = EventBus()
        bus.emit(CHANNEL_TRAIN, 1, "step", loss=0.5)
        bus.emit(CHANNEL_STREAM, 4, "note_on", pitch=60)
        bus.emit(CHANNEL_TRAIN, 2, "step", loss=0.25)
        assert [e.step for e in bus.select(CHANNEL_TRAIN)] == [1, 2]
        frame = bus.to_dataframe(CHANNEL_TRAIN)
        assert frame["loss"].tolist() == [0.5, 0.25]
        assert len(bus.to_dataframe()) == 3

    def test_empty_channel(self):
        frame = EventBus().to_dataframe(CHANNEL_STREAM)
        assert frame.empty
        assert list(frame.columns) == ["channel", "step", "action"]


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # bias correction makes the first update lr * sign(grad)
        p = Parameter(np.array([1.0, -2.0, 3.0]))
        p.grad = np.array([0.5, -4.0, 0.0])
        Adam([p], lr=0.1).step()
        np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)

    def test_skips_parameters_without_grad(self):
        p = Parameter(np.ones(2))
        Adam([p]).step()
        np.testing.assert_array_equal(p.data, np.ones(2))

    def test_minimises_a_quadratic(self):
        p = Parameter(np.array([5.0, -3.0]))
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            p.grad = 2.0 * p.data
            opt.step()
        assert np.abs(p.data).max() < 0.5
