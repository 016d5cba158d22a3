"""Event streams, event file I/O and adaptive temporal windowing."""

import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import EventFormatError, EventValidationError

log = logging.getLogger(__name__)

BINARY_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
assert BINARY_DTYPE.itemsize == 13


class Event(NamedTuple):
    t: int
    x: float
    y: float
    polarity: int


class EventStream:
    """Column-oriented, read-only event sequence.

    ``t`` is int64 microseconds, ``x``/``y`` float64 pixels and ``p`` int8
    polarity in {-1, +1}.
    """

    __slots__ = ("t", "x", "y", "p")

    def __init__(self, t, x, y, p):
        t = np.ascontiguousarray(t, dtype=np.int64)
        x = np.ascontiguousarray(x, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        p = np.ascontiguousarray(p, dtype=np.int8)
        if not (t.shape == x.shape == y.shape == p.shape and t.ndim == 1):
            raise ValueError("event columns must be 1-D arrays of equal length")
        for a in (t, x, y, p):
            a.flags.writeable = False
        self.t, self.x, self.y, self.p = t, x, y, p

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_events(cls, events):
        events = list(events)
        if not events:
            return cls.empty()
        t, x, y, p = zip(*events)
        return cls(t, x, y, p)

    def __len__(self):
        return self.t.size

    def __getitem__(self, item):
        if isinstance(item, (int, np.integer)):
            return Event(int(self.t[item]), float(self.x[item]), float(self.y[item]), int(self.p[item]))
        return EventStream(self.t[item], self.x[item], self.y[item], self.p[item])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def xy(self):
        return np.stack([self.x, self.y], axis=1)

    def validate(self, width, height):
        bad = (self.x < 0) | (self.x >= width) | (self.y < 0) | (self.y >= height)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise EventValidationError(
                f"event {i} at ({self.x[i]}, {self.y[i]}) outside sensor {width}x{height}"
            )
        if np.any((self.p != 1) & (self.p != -1)):
            raise EventValidationError("polarity must be +1 or -1")
        return self

    def time_slice(self, t0, t1):
        """Events with ``t0 <= t <= t1`` (stream must be sorted)."""
        i0 = np.searchsorted(self.t, t0, side="left")
        i1 = np.searchsorted(self.t, t1, side="right")
        return self[i0:i1]


def _infer_format(path):
    return "binary" if str(path).endswith(".evb") else "csv"


def _sort_events(t, x, y, p, max_disorder_us):
    if t.size < 2:
        return t, x, y, p
    running_max = np.maximum.accumulate(t)
    disorder = running_max - t
    worst = int(disorder.max())
    if worst == 0:
        return t, x, y, p
    if worst > max_disorder_us:
        i = int(np.argmax(disorder))
        raise EventFormatError(
            f"timestamps out of order by {worst} us (tolerance {max_disorder_us} us)", line=i + 1
        )
    order = np.argsort(t, kind="stable")
    return t[order], x[order], y[order], p[order]


def _parse_csv_slow(lines, start):
    t, x, y, p = [], [], [], []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        s = line.strip()
        if not s:
            continue
        parts = s.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"expected 4 comma-separated fields, got {len(parts)}", lineno)
        try:
            ti = int(parts[0])
            xi = float(parts[1])
            yi = float(parts[2])
            pi = int(parts[3])
        except ValueError as exc:
            raise EventFormatError(f"cannot parse {s!r}: {exc}", lineno) from None
        if pi not in (0, 1, -1):
            raise EventFormatError(f"polarity must be 0 or 1, got {pi}", lineno)
        t.append(ti)
        x.append(xi)
        y.append(yi)
        p.append(1 if pi == 1 else -1)
    return (np.array(t, dtype=np.int64), np.array(x, dtype=float),
            np.array(y, dtype=float), np.array(p, dtype=np.int8))


def _read_csv(path):
    with open(path) as f:
        lines = f.read().splitlines()
    start = 0
    while start < len(lines) and not lines[start].strip():
        start += 1
    if start < len(lines):
        first = lines[start].split(",")[0].strip()
        try:
            float(first)
        except ValueError:
            start += 1  # header line
    body = [ln for ln in lines[start:] if ln.strip()]
    if not body:
        return _parse_csv_slow([], 0)
    try:
        arr = np.loadtxt(body, delimiter=",", dtype=np.float64, ndmin=2)
        if arr.shape[1] != 4:
            raise ValueError
        t = arr[:, 0].astype(np.int64)
        if np.any(t != arr[:, 0]) or np.any(~np.isin(arr[:, 3], (0, 1, -1))):
            raise ValueError
        p = np.where(arr[:, 3] == 1, 1, -1).astype(np.int8)
        return t, arr[:, 1], arr[:, 2], p
    except ValueError:
        # slow path, locates the offending line
        return _parse_csv_slow(lines, start)


def _read_binary(path):
    size = os.path.getsize(path)
    if size % BINARY_DTYPE.itemsize:
        raise EventFormatError(
            f"binary event file size {size} is not a multiple of {BINARY_DTYPE.itemsize} bytes",
            line=size // BINARY_DTYPE.itemsize + 1,
        )
    rec = np.fromfile(path, dtype=BINARY_DTYPE)
    bad = np.flatnonzero(~np.isin(rec["p"], (0, 1, -1)))
    if bad.size:
        raise EventFormatError(f"invalid polarity {rec['p'][bad[0]]}", line=int(bad[0]) + 1)
    p = np.where(rec["p"] == 1, 1, -1).astype(np.int8)
    return rec["t"].astype(np.int64), rec["x"].astype(float), rec["y"].astype(float), p


def load_events(path, format=None, width=None, height=None, max_disorder_us=100):
    """Read an event file into a time-ordered :class:`EventStream`.

    ``format`` is ``"csv"`` or ``"binary"`` (inferred from the ``.evb``
    extension when omitted). Events out of order by at most
    ``max_disorder_us`` are stably sorted; larger disorder is an error. With
    ``width``/``height`` every event is bounds-checked.
    """
    format = format or _infer_format(path)
    if format == "csv":
        cols = _read_csv(path)
    elif format == "binary":
        cols = _read_binary(path)
    else:
        raise ValueError(f"unknown event format {format!r}")
    stream = EventStream(*_sort_events(*cols, max_disorder_us=max_disorder_us))
    if width is not None and height is not None:
        stream.validate(width, height)
    return stream


def save_events(path, stream, format=None):
    format = format or _infer_format(path)
    if format == "binary":
        if np.any(stream.x != np.round(stream.x)) or np.any(stream.y != np.round(stream.y)):
            raise ValueError("binary event format stores integer pixel coordinates only")
        rec = np.empty(len(stream), dtype=BINARY_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        rec.tofile(path)
        return
    integral = np.all(stream.x == np.round(stream.x)) and np.all(stream.y == np.round(stream.y))
    p01 = (stream.p > 0).astype(int)
    with open(path, "w") as f:
        if integral:
            xs, ys = stream.x.astype(np.int64), stream.y.astype(np.int64)
            f.writelines(f"{t},{x},{y},{p}\n" for t, x, y, p in zip(stream.t.tolist(), xs.tolist(), ys.tolist(), p01.tolist()))
        else:
            f.writelines(f"{t},{x!r},{y!r},{p}\n" for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), p01.tolist()))


@dataclass(frozen=True)
class WindowingConfig:
    """Interval growth parameters; ``tau_us`` is the base duration.

    Accepted windows last between ``min_mult * tau`` and ``max_mult * tau``
    and consecutive windows are at least ``gap_mult * tau`` apart.
    """

    tau_us: float = 15000.0
    min_mult: float = 1.0
    max_mult: float = 4.0
    gap_mult: float = 2.0
    max_events: int = 30000
    growth_mult: float = 0.5

    def __post_init__(self):
        if not (self.tau_us > 0 and 0 < self.min_mult < self.max_mult):
            raise ValueError("need tau > 0 and 0 < min_mult < max_mult")
        if not (self.gap_mult > 0 and self.max_events > 0 and self.growth_mult > 0):
            raise ValueError("gap_mult, max_events and growth_mult must be positive")


@dataclass
class EventWindow:
    """Contiguous run ``stream[start:stop]`` of events.

    ``t_ref`` is the midpoint of the first and last event timestamps.
    """

    start: int
    stop: int
    events: EventStream
    detection: object = field(default=None, repr=False)

    @property
    def t_start(self):
        return int(self.events.t[0])

    @property
    def t_end(self):
        return int(self.events.t[-1])

    @property
    def t_ref(self):
        return 0.5 * (self.t_start + self.t_end)

    @property
    def duration(self):
        return self.t_end - self.t_start

    def __len__(self):
        return self.stop - self.start


@dataclass
class WindowingResult:
    windows: list
    abandoned: int = 0
    attempts: int = 0

    def __iter__(self):
        return iter(self.windows)

    def __len__(self):
        return len(self.windows)


def window_events(stream, config, detector):
    """Scan ``stream`` for reference-frame windows.

    Each candidate starts at ``min_mult * tau`` and grows its right edge by
    ``growth_mult * tau`` while ``detector(window)`` returns a falsy value.
    A candidate is abandoned once it exceeds ``max_events`` or
    ``max_mult * tau``; the left edge then slides by ``gap_mult * tau``. The
    truthy detector result is stored on the accepted window.
    """
    t = stream.t
    n = len(stream)
    tau = config.tau_us
    lo_dur = config.min_mult * tau
    hi_dur = config.max_mult * tau
    step = config.growth_mult * tau
    gap = config.gap_mult * tau
    out = WindowingResult([])
    i0 = 0
    while i0 < n:
        t0 = int(t[i0])
        d = lo_dur
        accepted = None
        last_stop = -1
        while d <= hi_dur + 1e-9:
            i1 = int(np.searchsorted(t, t0 + d, side="right"))
            if i1 - i0 > config.max_events:
                break
            if i1 != last_stop and t[i1 - 1] - t0 >= lo_dur:
                last_stop = i1
                win = EventWindow(i0, i1, stream[i0:i1])
                out.attempts += 1
                det = detector(win)
                if det:
                    win.detection = det
                    accepted = win
                    break
            if t0 + d >= t[-1]:
                break
            d += step
        if accepted is not None:
            out.windows.append(accepted)
            i0 = int(np.searchsorted(t, accepted.t_end + gap, side="left"))
        else:
            out.abandoned += 1
            i0 = int(np.searchsorted(t, t0 + gap, side="left"))
    log.debug("windowing: %d accepted, %d abandoned, %d detector calls",
              len(out.windows), out.abandoned, out.attempts)
    return out
