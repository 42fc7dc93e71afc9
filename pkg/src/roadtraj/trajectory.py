"""Trajectories on a road network: points, time slots, text I/O, corpus helpers."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .exceptions import (
    DiscontinuousTrajectoryError,
    EmptyCorpusError,
    EmptyInputError,
    MissingSegmentError,
    NetworkParseError,
)
from .roadnet import shortest_length_path

N_TIME_SLOTS = 2880
MINUTES_PER_DAY = 1440

# Monday 2015-11-02 00:00 local time; sampled start times are placed in this week.
REFERENCE_MONDAY = datetime(2015, 11, 2, tzinfo=timezone.utc)


@dataclass(frozen=True)
class STPoint:
    segment: int
    timestamp: float


@dataclass
class Trajectory:
    """Time-ordered segment sequence with optional generation metadata in ``info``."""

    segments: tuple
    times: tuple
    tid: int | None = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.segments = tuple(int(s) for s in self.segments)
        self.times = tuple(float(t) for t in self.times)
        if len(self.segments) != len(self.times):
            raise ValueError("segments and times must have equal length")
        for a, b in zip(self.times, self.times[1:]):
            if b < a:
                raise ValueError("timestamps must be non-decreasing")

    def __len__(self):
        return len(self.segments)

    @property
    def points(self):
        return [STPoint(s, t) for s, t in zip(self.segments, self.times)]

    @property
    def origin(self):
        return self.segments[0]

    @property
    def destination(self):
        return self.segments[-1]

    @property
    def od(self):
        return (self.segments[0], self.segments[-1])

    def has_loop(self):
        return len(set(self.segments)) != len(self.segments)


def local_datetime(t, utc_offset_hours=0.0):
    return datetime.fromtimestamp(float(t), tz=timezone(timedelta(hours=utc_offset_hours)))


def encode_time(t, utc_offset_hours=0.0):
    """Map a timestamp to a slot in 1..2880.

    Weekdays (Mon-Fri) map to ``minute_of_day + 1``; weekends to
    ``minute_of_day + 1441``.
    """
    dt = local_datetime(t, utc_offset_hours)
    minute = dt.hour * 60 + dt.minute
    if dt.weekday() >= 5:
        return minute + MINUTES_PER_DAY + 1
    return minute + 1


def slot_start_timestamp(slot, utc_offset_hours=0.0):
    """A representative timestamp whose slot is ``slot`` (Monday or Saturday of the reference week)."""
    if not 1 <= slot <= N_TIME_SLOTS:
        raise ValueError(f"slot {slot} outside 1..{N_TIME_SLOTS}")
    weekend = slot > MINUTES_PER_DAY
    minute = (slot - 1) % MINUTES_PER_DAY
    day = 5 if weekend else 0
    local = REFERENCE_MONDAY + timedelta(days=day, minutes=minute)
    return local.timestamp() - utc_offset_hours * 3600.0


def advance_times(net, segments, t0):
    """Timestamps under the deterministic travel rule ``t_{i+1} = t_i + length/speed``."""
    times = [float(t0)]
    for s in segments[1:]:
        times.append(times[-1] + net.travel_seconds(s))
    return times


def is_continuous(traj, net):
    segs = traj.segments if isinstance(traj, Trajectory) else traj
    return all(net.is_adjacent(a, b) for a, b in zip(segs, segs[1:]))


def check_continuous(traj, net, closed_ok=False):
    """Raise unless ``traj`` is continuous on ``net`` and (optionally) closure-free."""
    segs = traj.segments
    for s in segs:
        net.row(s)
    for i, (a, b) in enumerate(zip(segs, segs[1:])):
        if not net.is_adjacent(a, b):
            raise DiscontinuousTrajectoryError(f"trajectory {traj.tid}: {a}->{b} at step {i} is not adjacent")
    if not closed_ok and net.closed:
        hit = [s for s in segs if s in net.closed]
        if hit:
            raise DiscontinuousTrajectoryError(f"trajectory {traj.tid} uses closed segments {hit}")


def preprocess_corpus(corpus, min_length=5):
    """Drop trajectories shorter than ``min_length`` and those revisiting a segment."""
    return [t for t in corpus if len(t) >= min_length and not t.has_loop()]


def split_corpus(corpus, seed, ratios=(0.6, 0.2, 0.2)):
    """Random train/validation/test split (default 6:2:2)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    n_train = int(round(ratios[0] * len(corpus)))
    n_val = int(round(ratios[1] * len(corpus)))
    pick = [corpus[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]


# -- text format ------------------------------------------------------------------

def format_trajectory(traj, tid=None):
    tid = traj.tid if tid is None else tid
    body = " ".join(f"{s}@{t:.3f}" for s, t in zip(traj.segments, traj.times))
    line = f"{tid} {body}"
    if traj.info.get("partial"):
        line += " ; partial"
    return line


def dumps_trajectories(trajs):
    return "".join(format_trajectory(t, i if t.tid is None else None) + "\n"
                   for i, t in enumerate(trajs))


def save_trajectories(trajs, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_trajectories(trajs))


def parse_trajectories(text):
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line, _, comment = raw.partition(";")
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise NetworkParseError("trajectory record needs an id and at least one point", lineno)
        try:
            tid = int(parts[0])
            segs, times = [], []
            for tok in parts[1:]:
                s, t = tok.split("@")
                segs.append(int(s))
                times.append(float(t))
            traj = Trajectory(segs, times, tid=tid)
        except ValueError as exc:
            raise NetworkParseError(f"bad trajectory record: {exc}", lineno) from None
        if "partial" in comment:
            traj.info["partial"] = True
        out.append(traj)
    return out


def load_trajectories(path):
    with open(path, encoding="utf-8") as fh:
        return parse_trajectories(fh.read())


def check_trajectory_segments(trajs, net):
    for t in trajs:
        if len(t) == 0:
            raise EmptyInputError("empty trajectory")
        for s in t.segments:
            if s not in net.index:
                raise MissingSegmentError(f"trajectory {t.tid} references unknown segment {s}")


# -- synthetic corpus ---------------------------------------------------------------

def synth_shortest_path_corpus(net, n_trajectories, seed, *, n_od_pairs=100, min_length=5,
                               utc_offset_hours=0.0):
    """Corpus of deterministic shortest (by length) paths over a fixed OD set.

    Each chosen origin is paired with exactly one destination, so the route
    is a deterministic function of the origin segment. OD pairs are drawn
    with Zipf-like popularity; start times are spread over a reference week.
    """
    if n_trajectories < 1:
        raise EmptyCorpusError("n_trajectories must be >= 1")
    rng = np.random.default_rng(seed)
    ids = net.ids
    origins = list(rng.permutation(len(ids)))
    routes = []
    for oi in origins:
        if len(routes) >= n_od_pairs:
            break
        o = ids[oi]
        if o in net.closed:
            continue
        for _attempt in range(8):
            d = ids[int(rng.integers(len(ids)))]
            if d == o or d in net.closed:
                continue
            path = shortest_length_path(net, o, d)
            if path is not None and len(path) >= min_length:
                routes.append(path)
                break
    if not routes:
        raise EmptyCorpusError("could not find any route of the requested minimum length")
    weights = 1.0 / np.arange(1, len(routes) + 1) ** 0.5
    weights /= weights.sum()
    picks = rng.choice(len(routes), size=n_trajectories, p=weights)
    week = 7 * 24 * 3600
    t_base = REFERENCE_MONDAY.timestamp() - utc_offset_hours * 3600.0
    corpus = []
    for i, r in enumerate(picks):
        t0 = t_base + float(rng.integers(0, week))
        path = routes[int(r)]
        corpus.append(Trajectory(path, advance_times(net, path, t0), tid=i))
    return corpus


def random_walk_corpus(net, n_trajectories, seed, *, length=10, utc_offset_hours=0.0):
    """Loop-free random walks (used as "fake" data in discriminator checks)."""
    rng = np.random.default_rng(seed)
    ids = net.ids
    t_base = REFERENCE_MONDAY.timestamp() - utc_offset_hours * 3600.0
    out = []
    while len(out) < n_trajectories:
        cur = ids[int(rng.integers(len(ids)))]
        path = [cur]
        seen = {cur}
        for _ in range(length - 1):
            nxt = [s for s in net.open_successors(cur) if s not in seen]
            if not nxt:
                break
            cur = nxt[int(rng.integers(len(nxt)))]
            path.append(cur)
            seen.add(cur)
        if len(path) >= 2:
            t0 = t_base + float(rng.integers(0, 7 * 24 * 3600))
            out.append(Trajectory(path, advance_times(net, path, t0), tid=len(out)))
    return out


def slot_bucket(slot, bucket_minutes=30):
    return (slot - 1) // bucket_minutes

