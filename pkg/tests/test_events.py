import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evcal.errors import EventFormatError, EventValidationError
from evcal.events import (
    BINARY_DTYPE,
    EventStream,
    WindowingConfig,
    load_events,
    save_events,
    window_events,
)


def _stream(rng, n, width=346, height=260, integral=True, t_max=10**6):
    t = np.sort(rng.integers(0, t_max, n))
    x = rng.integers(0, width, n) if integral else rng.uniform(0, width - 1, n)
    y = rng.integers(0, height, n) if integral else rng.uniform(0, height - 1, n)
    p = np.where(rng.random(n) < 0.5, 1, -1)
    return EventStream(t, x, y, p)


def _assert_same(a, b):
    for name in ("t", "x", "y", "p"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 300), seed=st.integers(0, 2**31 - 1), integral=st.booleans())
def test_csv_round_trip(tmp_path_factory, n, seed, integral):
    s = _stream(np.random.default_rng(seed), n, integral=integral)
    path = tmp_path_factory.mktemp("csv") / "ev.csv"
    save_events(path, s)
    _assert_same(load_events(path), s)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 300), seed=st.integers(0, 2**31 - 1))
def test_binary_round_trip(tmp_path_factory, n, seed):
    s = _stream(np.random.default_rng(seed), n)
    path = tmp_path_factory.mktemp("evb") / "ev.evb"
    save_events(path, s)
    assert path.stat().st_size == 13 * n
    _assert_same(load_events(path), s)


def test_binary_record_layout():
    assert BINARY_DTYPE.itemsize == 13
    rec = np.zeros(1, BINARY_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = 0x0102030405060708, 0x1122, 0x3344, 1
    raw = rec.tobytes()
    assert raw[:8] == bytes([8, 7, 6, 5, 4, 3, 2, 1])  # little-endian
    assert raw[8:10] == bytes([0x22, 0x11]) and raw[10:12] == bytes([0x44, 0x33])
    assert raw[12] == 1


def test_csv_header_and_polarity_mapping(tmp_path):
    path = tmp_path / "ev.csv"
    path.write_text("t_us,x,y,p\n10,1,2,0\n20,3,4,1\n\n")
    s = load_events(path)
    np.testing.assert_array_equal(s.t, [10, 20])
    np.testing.assert_array_equal(s.p, [-1, 1])


def test_empty_file_gives_empty_stream(tmp_path):
    path = tmp_path / "ev.csv"
    path.write_text("")
    assert len(load_events(path)) == 0


@pytest.mark.parametrize("body, line", [
    ("10,1,2,1\n20,1,2\n", 2),
    ("10,1,2,1\n20,1,abc,1\n", 2),
    ("t_us,x,y,p\n10,1,2,1\n20,1,2,5\n", 3),
])
def test_malformed_csv_reports_line(tmp_path, body, line):
    path = tmp_path / "ev.csv"
    path.write_text(body)
    with pytest.raises(EventFormatError) as exc:
        load_events(path)
    assert exc.value.line == line


def test_truncated_binary_is_an_error(tmp_path):
    path = tmp_path / "ev.evb"
    path.write_bytes(b"\0" * 20)
    with pytest.raises(EventFormatError):
        load_events(path)


def test_small_disorder_is_sorted_large_disorder_rejected(tmp_path):
    path = tmp_path / "ev.csv"
    path.write_text("100,1,1,1\n60,2,2,0\n200,3,3,1\n")
    s = load_events(path, max_disorder_us=100)
    np.testing.assert_array_equal(s.t, [60, 100, 200])
    np.testing.assert_array_equal(s.x, [2, 1, 3])
    with pytest.raises(EventFormatError):
        load_events(path, max_disorder_us=10)


def test_bounds_validation(tmp_path):
    path = tmp_path / "ev.csv"
    path.write_text("1,346,5,1\n")
    with pytest.raises(EventValidationError):
        load_events(path, width=346, height=260)
    assert len(load_events(path)) == 1


def test_stream_is_read_only_and_sliceable(rng):
    s = _stream(rng, 50)
    with pytest.raises(ValueError):
        s.t[0] = 5
    sub = s.time_slice(s.t[10], s.t[20])
    assert np.all((sub.t >= s.t[10]) & (sub.t <= s.t[20]))
    e = s[3]
    assert (e.t, e.x, e.y, e.polarity) == (s.t[3], s.x[3], s.y[3], s.p[3])


# --------------------------------------------------------------------------
# windowing


def _uniform_stream(duration_us, rate_per_us=0.05, seed=0):
    rng = np.random.default_rng(seed)
    n = int(duration_us * rate_per_us)
    return EventStream(np.sort(rng.integers(0, duration_us, n)), np.zeros(n), np.zeros(n), np.ones(n))


def test_always_accepting_detector():
    cfg = WindowingConfig(tau_us=10_000, min_mult=1, max_mult=5, gap_mult=2)
    s = _uniform_stream(400_000)
    res = window_events(s, cfg, lambda w: True)
    assert len(res) > 5
    for w in res:
        # durations count from the first to the last contained event
        assert 10_000 <= w.duration <= 50_000
    for a, b in zip(res.windows, res.windows[1:]):
        assert b.t_start - a.t_end >= 20_000
        assert b.t_ref - a.t_ref >= 20_000
        assert b.start >= a.stop  # no event in two windows
    assert res.abandoned == 0


def test_no_window_over_an_empty_span():
    cfg = WindowingConfig(tau_us=10_000, min_mult=1, max_mult=5, gap_mult=2)
    a = _uniform_stream(100_000, seed=1)
    b = _uniform_stream(100_000, seed=2)
    s = EventStream(np.concatenate([a.t, b.t + 300_000]), np.zeros(len(a) + len(b)),
                    np.zeros(len(a) + len(b)), np.ones(len(a) + len(b)))
    res = window_events(s, cfg, lambda w: True)
    for w in res:
        assert not (w.t_start < 300_000 and w.t_end > 100_000)
        assert w.duration <= 50_000


def test_rejecting_detector_abandons_every_candidate():
    cfg = WindowingConfig()
    s = _uniform_stream(300_000)
    calls = []
    res = window_events(s, cfg, lambda w: calls.append(w.duration) or None)
    assert len(res) == 0 and res.abandoned > 0
    assert res.attempts == len(calls)
    assert max(calls) <= cfg.max_mult * cfg.tau_us


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), need=st.floats(15_000, 70_000))
def test_windows_grow_until_detection(seed, need):
    """A detector that needs a minimum duration gets windows of at least
    that length, never beyond the maximum."""
    cfg = WindowingConfig()
    s = _uniform_stream(500_000, seed=seed)
    res = window_events(s, cfg, lambda w: w.duration >= need)
    for w in res:
        assert need <= w.duration <= cfg.max_mult * cfg.tau_us
        assert w.duration <= need + cfg.growth_mult * cfg.tau_us
        assert w.detection is True
        assert w.t_ref == 0.5 * (w.t_start + w.t_end)
        _assert_same(w.events, s[w.start : w.stop])
    if need > cfg.max_mult * cfg.tau_us:
        assert len(res) == 0


def test_max_events_abandons_dense_windows():
    cfg = WindowingConfig(max_events=100)
    s = _uniform_stream(200_000, rate_per_us=0.05)  # ~750 events per tau
    res = window_events(s, cfg, lambda w: True)
    assert len(res) == 0 and res.abandoned > 0


def test_windowing_config_validation():
    with pytest.raises(ValueError):
        WindowingConfig(min_mult=4.0, max_mult=1.0)
    with pytest.raises(ValueError):
        WindowingConfig(tau_us=0)
