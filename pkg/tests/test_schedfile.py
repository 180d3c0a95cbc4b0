import numpy as np
import pytest

from hqstream.errors import FormatError, ScheduleError
from hqstream.latent import StepSchedule, trit_schedule
from hqstream.schedfile import dumps_schedule, loads_schedule, read_schedule, write_schedule


def test_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    d = np.sort(rng.uniform(0.1, 10, (4, 3)), axis=0)[::-1]
    s = StepSchedule(d, d * rng.uniform(0.8, 1.2, d.shape), rng.uniform(0.1, 3, 4))
    path = tmp_path / "s.txt"
    write_schedule(path, s, T=0.3, mode="exact")
    back, extras = read_schedule(path)
    assert back.delta.tobytes() == s.delta.tobytes()
    assert back.delta_inv.tobytes() == s.delta_inv.tobytes()
    assert back.gamma.tobytes() == s.gamma.tobytes()
    assert extras == {"T": "0.3", "mode": "exact"}


def test_delta_inv_defaults_to_delta():
    text = "layers = 2\nchannels = 1\ndelta.1 = 3\ndelta.2 = 1  # fine\n"
    s, _ = loads_schedule(text)
    assert s.delta_inv.tolist() == [[3.0], [1.0]]


@pytest.mark.parametrize(
    "text",
    [
        "channels = 1\ndelta.1 = 1\n",
        "layers = 1\nchannels = 2\ndelta.1 = 1\n",
        "layers = 1\nchannels = 1\ndelta.1 = x\n",
        "layers = 1\nchannels = 1\n",
        "layers = 1\nchannels = 1\ndelta.1 = 1\ndelta.1 = 2\n",
        "layers = 1\nchannels = 1\ndelta.1 = 1\ngamma = 1 2\n",
        "layers = 1\nchannels = 1\ndelta.1 = 1\ndelta.2 = 1\n",
        "layers = 1\nchannels = 1\nnonsense\n",
    ],
)
def test_malformed(text):
    with pytest.raises(FormatError):
        loads_schedule(text)


def test_invalid_schedule_reports_coordinate():
    text = dumps_schedule(trit_schedule(3, 2)).replace("delta.3 = 1.0 1.0", "delta.3 = 1.0 50.0")
    with pytest.raises(ScheduleError) as exc:
        loads_schedule(text)
    assert (exc.value.layer, exc.value.channel) == (3, 1)
