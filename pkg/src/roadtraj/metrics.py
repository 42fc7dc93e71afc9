"""Macro (pattern distributions compared by JSD) and micro (pairwise distance) similarity."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .exceptions import EmptyInputError, InvalidDistributionError
from .roadnet import haversine_matrix

N_BINS = 100


@dataclass
class Distribution:
    """Discrete distribution over hashable labels."""

    probs: dict

    def __post_init__(self):
        vals = np.array(list(self.probs.values()), dtype=float)
        if vals.size == 0:
            raise InvalidDistributionError("empty distribution")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise InvalidDistributionError("probabilities must be finite and >= 0")
        if abs(vals.sum() - 1.0) > 1e-12 * max(1, vals.size):
            raise InvalidDistributionError(f"probabilities sum to {vals.sum()}, not 1")

    @classmethod
    def from_counts(cls, counts):
        total = float(sum(counts.values()))
        if total <= 0:
            raise InvalidDistributionError("no mass")
        return cls({k: v / total for k, v in counts.items()})

    def __getitem__(self, key):
        return self.probs.get(key, 0.0)

    @property
    def support(self):
        return set(self.probs)


def _segments(t):
    return t.segments if hasattr(t, "segments") else tuple(t)


def _require(trajs):
    trajs = list(trajs)
    if not trajs:
        raise EmptyInputError("need at least one trajectory")
    return trajs


def travel_distance(traj, net):
    """Sum of segment lengths (meters)."""
    lengths = net.lengths
    return float(sum(lengths[net.row(s)] for s in _segments(traj)))


def radius_of_gyration(traj, net):
    """RMS haversine distance of visited midpoints to their mean lat/lon centroid."""
    rows = [net.row(s) for s in _segments(traj)]
    if not rows:
        raise EmptyInputError("empty trajectory")
    lat = net.lats[rows]
    lon = net.lons[rows]
    d = haversine_matrix(lat, lon, [lat.mean()], [lon.mean()])[:, 0]
    return float(math.sqrt(np.mean(d * d)))


def location_frequency(trajs, net=None):
    counts = Counter()
    for t in _require(trajs):
        if net is not None:
            for s in _segments(t):
                net.row(s)
        counts.update(_segments(t))
    return Distribution.from_counts(counts)


def od_flow(trajs):
    counts = Counter()
    for t in _require(trajs):
        s = _segments(t)
        if not s:
            raise EmptyInputError("empty trajectory")
        counts[(s[0], s[-1])] += 1
    return Distribution.from_counts(counts)


def histogram_distribution(values, lo, hi, bins=N_BINS):
    """Equal-width histogram on ``[lo, hi]``; values outside clamp to the edge bins."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise EmptyInputError("no values to histogram")
    if hi <= lo:
        idx = np.zeros(values.size, dtype=int)
    else:
        idx = np.floor((values - lo) / (hi - lo) * bins).astype(int)
        idx = np.clip(idx, 0, bins - 1)
    return Distribution.from_counts(Counter(int(i) for i in idx))


def jsd(p, q):
    """Jensen-Shannon divergence in bits (range [0, 1]); supports are unioned, 0 log 0 = 0."""
    if not isinstance(p, Distribution):
        p = Distribution(dict(p))
    if not isinstance(q, Distribution):
        q = Distribution(dict(q))
    keys = sorted(p.support | q.support, key=repr)
    pv = np.array([p[k] for k in keys])
    qv = np.array([q[k] for k in keys])
    m = 0.5 * (pv + qv)
    return float(0.5 * _kl2(pv, m) + 0.5 * _kl2(qv, m))


def _kl2(a, m):
    nz = a > 0
    return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))


# -- micro distances ------------------------------------------------------------------

def _cost_matrix(t1, t2, net):
    r1 = [net.row(s) for s in _segments(t1)]
    r2 = [net.row(s) for s in _segments(t2)]
    if not r1 or not r2:
        raise EmptyInputError("distance needs two non-empty trajectories")
    return net.distance_matrix()[np.ix_(r1, r2)]


def dtw(t1, t2, net):
    """Dynamic time warping with haversine point cost between segment midpoints."""
    return dtw_from_costs(_cost_matrix(t1, t2, net))


def dtw_from_costs(cost):
    n, m = cost.shape
    cost = cost.tolist()
    inf = math.inf
    prev = [inf] * (m + 1)
    prev[0] = 0.0
    for i in range(n):
        row = cost[i]
        cur = [inf] * (m + 1)
        for j in range(m):
            a, b, c = prev[j], prev[j + 1], cur[j]
            best = a if a <= b else b
            if c < best:
                best = c
            cur[j + 1] = row[j] + best
        prev = cur
        prev[0] = inf
    return float(prev[m])


def hausdorff(t1, t2, net):
    cost = _cost_matrix(t1, t2, net)
    return float(max(cost.min(axis=1).max(), cost.min(axis=0).max()))


def directed_hausdorff(t1, t2, net):
    return float(_cost_matrix(t1, t2, net).min(axis=1).max())


def edr(t1, t2):
    """Edit distance with match = identical segment id, unit costs, normalized by the longer length."""
    a, b = list(_segments(t1)), list(_segments(t2))
    if not a or not b:
        raise EmptyInputError("EDR needs two non-empty trajectories")
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            sub = prev[j - 1] + (0 if x == y else 1)
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1] / max(len(a), len(b))


# -- evaluation report ---------------------------------------------------------------------

REPORT_FIELDS = (
    "distance_jsd", "radius_jsd", "location_jsd", "od_flow_jsd",
    "hausdorff_mean", "dtw_mean", "edr_mean",
    "n_real", "n_generated", "n_micro", "n_micro_skipped",
)


@dataclass
class EvalReport:
    distance_jsd: float
    radius_jsd: float
    location_jsd: float
    od_flow_jsd: float
    hausdorff_mean: float
    dtw_mean: float
    edr_mean: float
    n_real: int
    n_generated: int
    n_micro: int
    n_micro_skipped: int
    config: dict = field(default_factory=dict)

    @property
    def macro(self):
        return {"distance": self.distance_jsd, "radius": self.radius_jsd,
                "location": self.location_jsd, "od_flow": self.od_flow_jsd}

    @property
    def micro(self):
        return {"hausdorff": self.hausdorff_mean, "dtw": self.dtw_mean, "edr": self.edr_mean}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name in REPORT_FIELDS:
            v = getattr(self, name)
            w.writerow([name, v if isinstance(v, int) else f"{v:.10f}"])
        for k in sorted(self.config):
            w.writerow([f"config.{k}", self.config[k]])
        return buf.getvalue()

    def to_text(self):
        lines = ["Evaluation report", "", "Macro similarity (JSD, base 2; lower is better)"]
        lines += [f"  {k:<18}{v:.4f}" for k, v in self.macro.items()]
        lines += ["", "Micro similarity (OD-matched means)"]
        lines += [f"  {'hausdorff (m)':<18}{self.hausdorff_mean:.2f}",
                  f"  {'dtw (m)':<18}{self.dtw_mean:.2f}",
                  f"  {'edr':<18}{self.edr_mean:.4f}"]
        lines += ["", f"real={self.n_real} generated={self.n_generated} "
                      f"micro={self.n_micro} micro_skipped={self.n_micro_skipped}"]
        return "\n".join(lines) + "\n"


def heatmap_csv(trajs, net):
    """``segment_id,lat,lon,frequency`` rows (normalized location frequency)."""
    dist = location_frequency(trajs, net)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["segment_id", "lat", "lon", "frequency"])
    for sid in net.ids:
        seg = net.segment(sid)
        w.writerow([sid, f"{seg.lat:.7f}", f"{seg.lon:.7f}", f"{dist[sid]:.10f}"])
    return buf.getvalue()


def evaluate(real, generated, net, micro_sample_size=5000, seed=0):
    """Compare generated trajectories with real ones.

    Macro: JSD of travel distance, radius of gyration (100 bins over the
    real set's range), location frequency and OD flow. Micro: a seeded
    sample of generated trajectories, each compared with the real
    trajectories sharing its OD (minimum distance when several exist).
    """
    real = _require(real)
    generated = _require(generated)
    rd = [travel_distance(t, net) for t in real]
    gd = [travel_distance(t, net) for t in generated]
    rr = [radius_of_gyration(t, net) for t in real]
    gr = [radius_of_gyration(t, net) for t in generated]
    lo, hi = min(rd), max(rd)
    dist_j = jsd(histogram_distribution(rd, lo, hi), histogram_distribution(gd, lo, hi))
    lo, hi = min(rr), max(rr)
    rad_j = jsd(histogram_distribution(rr, lo, hi), histogram_distribution(gr, lo, hi))
    loc_j = jsd(location_frequency(real, net), location_frequency(generated, net))
    od_j = jsd(od_flow(real), od_flow(generated))

    by_od = {}
    for t in real:
        by_od.setdefault(t.od, []).append(t)
    rng = np.random.default_rng(seed)
    n_sample = min(micro_sample_size, len(generated))
    picks = sorted(rng.choice(len(generated), size=n_sample, replace=False).tolist())
    hs, ds, es = [], [], []
    skipped = 0
    for i in picks:
        g = generated[i]
        refs = by_od.get(g.od)
        if not refs:
            skipped += 1
            continue
        hs.append(min(hausdorff(g, r, net) for r in refs))
        ds.append(min(dtw(g, r, net) for r in refs))
        es.append(min(edr(g, r) for r in refs))
    mean = (lambda xs: float(np.mean(xs)) if xs else 0.0)
    return EvalReport(dist_j, rad_j, loc_j, od_j, mean(hs), mean(ds), mean(es),
                      len(real), len(generated), len(hs), skipped,
                      config={"micro_sample_size": micro_sample_size, "seed": seed, "bins": N_BINS})
