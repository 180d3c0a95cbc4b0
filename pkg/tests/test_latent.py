import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hqstream.errors import FormatError, ScheduleError, ShapeError
from hqstream.latent import (
    GaussianParams,
    SourceConfig,
    StepSchedule,
    center,
    load_latent,
    read_importance,
    sample_source,
    store_latent,
    trit_schedule,
    uncenter,
    validate_schedule,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, width=64)


def test_center_subtracts_mean():
    y = np.array([[[1.5, -2.0]]])
    p = GaussianParams(np.array([[[0.5, -2.0]]]), np.ones((1, 1, 2)))
    np.testing.assert_array_equal(center(y, p), [[[1.0, 0.0]]])


def test_center_with_zero_mean_is_bitwise_identity():
    y = np.random.default_rng(3).normal(size=(2, 3, 4))
    p = GaussianParams(np.zeros_like(y), np.ones_like(y))
    assert center(y, p).tobytes() == y.tobytes()


@given(arrays(np.float64, (2, 3, 3), elements=finite), arrays(np.float64, (2, 3, 3), elements=finite))
def test_center_round_trip(y, mu):
    p = GaussianParams(mu, np.ones_like(mu))
    back = uncenter(center(y, p), p)
    # y - mu + mu is exact whenever the subtraction is; compare to that form
    np.testing.assert_array_equal(back, (y - mu) + mu)


def test_center_shape_mismatch():
    p = GaussianParams(np.zeros((1, 2, 2)), np.ones((1, 2, 2)))
    with pytest.raises(ShapeError):
        center(np.zeros((1, 2, 3)), p)


def test_params_reject_nonpositive_sigma():
    with pytest.raises(ValueError):
        GaussianParams(np.zeros(3), np.array([1.0, 0.0, 1.0]))


def test_sample_source_is_deterministic():
    cfg = SourceConfig(shape=(2, 8, 8), seed=11)
    a, pa = sample_source(cfg)
    b, pb = sample_source(cfg)
    assert a.tobytes() == b.tobytes()
    assert pa.sigma.tobytes() == pb.sigma.tobytes()
    c, _ = sample_source(SourceConfig(shape=(2, 8, 8), seed=12))
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("spread", ["channel", "component"])
def test_sample_source_sigma_in_range(spread):
    _, p = sample_source(SourceConfig(shape=(4, 16, 16), sigma_spread=spread, seed=2))
    assert p.sigma.min() >= 0.1 and p.sigma.max() <= 10.0


def test_sample_source_mean_converges():
    cfg = SourceConfig(shape=(1, 1000, 1000), sigma_range=(1.0, 1.0), mu_scale=0.0, seed=5)
    y, p = sample_source(cfg)
    assert np.all(p.sigma == 1.0) and np.all(p.mu == 0.0)
    assert abs(y.mean()) < 0.01


def test_trit_schedule_validates():
    s = trit_schedule(5, 3)
    np.testing.assert_array_equal(s.delta[:, 0], [81, 27, 9, 3, 1])
    validate_schedule(s)


def test_schedule_monotonicity_violation_reports_coordinate():
    d = np.array([[81.0, 81.0], [27.0, 90.0], [9.0, 9.0]])
    with pytest.raises(ScheduleError) as exc:
        validate_schedule(StepSchedule(d))
    assert (exc.value.layer, exc.value.channel) == (2, 1)


def test_schedule_zero_step_rejected():
    d = np.array([[3.0, 3.0], [0.0, 1.0]])
    with pytest.raises(ScheduleError) as exc:
        validate_schedule(StepSchedule(d))
    assert (exc.value.layer, exc.value.channel) == (2, 0)


def test_schedule_bad_gamma_rejected():
    with pytest.raises(ScheduleError):
        validate_schedule(StepSchedule([[1.0]], gamma=[0.0]))


def test_schedule_channel_count_checked():
    with pytest.raises(ScheduleError):
        validate_schedule(trit_schedule(2, 3), n_channels=4)


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@given(
    st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)).flatmap(
        lambda s: st.tuples(
            arrays(np.float32, s, elements=st.floats(-1024, 1024, width=32)),
            arrays(np.float32, s, elements=st.floats(-1024, 1024, width=32)),
            arrays(np.float32, s, elements=st.floats(1 / 1024, 1024, width=32)),
        )
    )
)
def test_hql_round_trip_is_bitwise(planes):
    y, mu, sigma = (_f32(a) for a in planes)
    data = store_latent(y, GaussianParams(mu, sigma))
    y2, p2 = load_latent(data)
    assert y2.tobytes() == y.tobytes()
    assert p2.mu.tobytes() == mu.tobytes()
    assert p2.sigma.tobytes() == sigma.tobytes()
    assert read_importance(data) is None


def test_hql_layout():
    y = np.arange(6, dtype=np.float64).reshape(1, 2, 3)
    data = store_latent(y, GaussianParams(np.zeros_like(y), np.ones_like(y)))
    assert data[:4] == b"HQL1" and data[4] == 1
    assert int.from_bytes(data[5:9], "little") == 1
    assert int.from_bytes(data[9:13], "little") == 2
    assert int.from_bytes(data[13:17], "little") == 3
    assert len(data) == 17 + 3 * 6 * 4
    np.testing.assert_array_equal(np.frombuffer(data[17:41], "<f4"), np.arange(6))


def test_hql_importance_plane():
    y = np.zeros((1, 2, 2))
    im = np.array([[[0.1, 0.9], [0.5, 1.0]]])
    data = store_latent(y, GaussianParams(y, np.ones_like(y)), importance=im)
    assert data[4] == 0x81
    np.testing.assert_allclose(read_importance(data), im, rtol=1e-7)
    load_latent(data)


def test_hql_truncated_rejected():
    y = np.zeros((1, 2, 2))
    data = store_latent(y, GaussianParams(y, np.ones_like(y)))
    for cut in (0, 3, 16, len(data) - 1):
        with pytest.raises(FormatError):
            load_latent(data[:cut])


def test_hql_bad_magic_rejected():
    y = np.zeros((1, 1, 1))
    data = bytearray(store_latent(y, GaussianParams(y, np.ones_like(y))))
    data[0:4] = b"XXXX"
    with pytest.raises(FormatError):
        load_latent(bytes(data))


def test_hql_zero_sigma_rejected():
    y = np.zeros((1, 1, 2))
    data = bytearray(store_latent(y, GaussianParams(y, np.ones_like(y))))
    data[-4:] = np.float32(0).tobytes()
    with pytest.raises(FormatError):
        load_latent(bytes(data))


def test_hql_nonfinite_rejected():
    y = np.zeros((1, 1, 2))
    data = bytearray(store_latent(y, GaussianParams(y, np.ones_like(y))))
    data[17:21] = np.float32(np.inf).tobytes()
    with pytest.raises(FormatError):
        load_latent(bytes(data))
