"""Structural regions: balanced min-cut partitioning, road/region mapping, boundary segments."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .exceptions import InvalidArgumentError, MappingError, MissingSegmentError, NetworkParseError
from .roadnet import RoadNetwork, RoadSegment
from .trajectory import Trajectory


@dataclass(frozen=True)
class Partition:
    k: int
    assignment: dict
    epsilon: float
    cut: int = 0

    def region_of(self, sid):
        try:
            return self.assignment[sid]
        except KeyError:
            raise MissingSegmentError(f"segment {sid} has no region") from None

    def members(self, region):
        return sorted(s for s, r in self.assignment.items() if r == region)

    def block_sizes(self):
        sizes = Counter(self.assignment.values())
        return [sizes.get(r, 0) for r in range(self.k)]

    def max_block(self):
        return balance_limit(len(self.assignment), self.k, self.epsilon)


def balance_limit(n, k, epsilon):
    """Largest allowed block: ``floor((1+eps) n / k)``, but never below ``ceil(n / k)``."""
    return max(int(math.floor((1 + epsilon) * n / k + 1e-9)), -(-n // k))


# -- multilevel partitioner -------------------------------------------------------------

class _Graph:
    """Undirected weighted graph with node weights (adjacency as list of dicts)."""

    def __init__(self, nbrs, vw):
        self.nbrs = nbrs
        self.vw = vw

    @property
    def n(self):
        return len(self.vw)


def _undirected(net):
    n = len(net)
    idx = net.index
    nbrs = [defaultdict(int) for _ in range(n)]
    for a, b in net.edges():
        i, j = idx[a], idx[b]
        if i == j:
            continue
        nbrs[i][j] += 1
        nbrs[j][i] += 1
    return _Graph([dict(d) for d in nbrs], [1] * n)


def _coarsen(g, rng, max_vw):
    order = rng.permutation(g.n)
    match = [-1] * g.n
    for u in order:
        u = int(u)
        if match[u] != -1:
            continue
        best, best_w = -1, -1
        for v, w in sorted(g.nbrs[u].items()):
            if match[v] != -1 or v == u:
                continue
            if g.vw[u] + g.vw[v] > max_vw:
                continue
            if w > best_w:
                best, best_w = v, w
        if best == -1:
            match[u] = u
        else:
            match[u] = best
            match[best] = u
    cmap = [-1] * g.n
    nc = 0
    for u in range(g.n):
        if cmap[u] == -1:
            cmap[u] = nc
            cmap[match[u]] = nc
            nc += 1
    vw = [0] * nc
    nbrs = [defaultdict(int) for _ in range(nc)]
    for u in range(g.n):
        cu = cmap[u]
        vw[cu] += g.vw[u]
        for v, w in g.nbrs[u].items():
            cv = cmap[v]
            if cv != cu:
                nbrs[cu][cv] += w
    return _Graph([dict(d) for d in nbrs], vw), cmap


def _cut(g, part):
    return sum(w for u in range(g.n) for v, w in g.nbrs[u].items() if part[u] != part[v]) // 2


def _grow(g, k, rng, target):
    """Greedy graph growing: each block absorbs the frontier node most connected to it."""
    part = [-1] * g.n
    weights = [0] * k
    unassigned = set(range(g.n))
    for b in range(k - 1):
        if not unassigned:
            break
        pool = sorted(unassigned)
        seed = pool[int(rng.integers(len(pool)))]
        frontier = {seed: 0}
        rejected = set()
        while weights[b] < target and unassigned:
            if not frontier:
                pool = sorted(unassigned - rejected)
                if not pool:
                    break
                frontier = {pool[0]: 0}
            u = max(sorted(frontier), key=lambda x: frontier[x])
            del frontier[u]
            if part[u] != -1:
                continue
            if weights[b] + g.vw[u] > target and weights[b] > 0:
                rejected.add(u)
                continue
            part[u] = b
            weights[b] += g.vw[u]
            unassigned.discard(u)
            for v, w in g.nbrs[u].items():
                if part[v] == -1:
                    frontier[v] = frontier.get(v, 0) + w
    for u in unassigned:
        part[u] = k - 1
        weights[k - 1] += g.vw[u]
    return part


def _refine(g, part, k, limit, passes=8):
    """Boundary moves with positive gain (or zero gain easing balance) under the weight limit."""
    weights = [0] * k
    counts = [0] * k
    for u in range(g.n):
        weights[part[u]] += g.vw[u]
        counts[part[u]] += 1
    for _ in range(passes):
        moved = 0
        for u in range(g.n):
            a = part[u]
            if counts[a] <= 1:
                continue
            conn = defaultdict(int)
            for v, w in g.nbrs[u].items():
                conn[part[v]] += w
            internal = conn.get(a, 0)
            best, best_gain = None, 0
            for b in sorted(conn):
                if b == a or weights[b] + g.vw[u] > limit:
                    continue
                gain = conn[b] - internal
                better_balance = weights[b] + g.vw[u] < weights[a]
                if gain > best_gain or (gain == best_gain and gain >= 0 and best is None
                                        and better_balance and gain == 0 and weights[a] > limit):
                    best, best_gain = b, gain
            if best is not None and (best_gain > 0 or weights[a] > limit):
                part[u] = best
                weights[a] -= g.vw[u]
                weights[best] += g.vw[u]
                counts[a] -= 1
                counts[best] += 1
                moved += 1
        if not moved:
            break
    return part


def _rebalance(g, part, k, limit):
    """Move nodes out of overweight blocks, preferring adjacent light blocks and small cut growth."""
    weights = [0] * k
    for u in range(g.n):
        weights[part[u]] += g.vw[u]
    for _ in range(g.n * 2):
        over = [b for b in range(k) if weights[b] > limit]
        if not over:
            break
        a = over[0]
        best = None
        for u in range(g.n):
            if part[u] != a:
                continue
            conn = defaultdict(int)
            for v, w in g.nbrs[u].items():
                conn[part[v]] += w
            for b in range(k):
                if b == a or weights[b] + g.vw[u] > limit:
                    continue
                score = (conn.get(b, 0) - conn.get(a, 0), -weights[b], -u)
                if best is None or score > best[0]:
                    best = (score, u, b)
        if best is None:
            break
        _, u, b = best
        part[u] = b
        weights[a] -= g.vw[u]
        weights[b] += g.vw[u]
    return part


def partition_network(net, k, epsilon=0.03, seed=0, trials=4):
    """Partition segments into ``k`` non-empty blocks, minimizing cut edges.

    Multilevel scheme: heavy-edge matching coarsening, greedy graph-growing
    initial partitions (best of ``trials``), then projection with boundary
    refinement at every level. The balance bound of :func:`balance_limit`
    always holds on the result.
    """
    n = len(net)
    if k < 2:
        raise InvalidArgumentError("k must be >= 2")
    if n < k:
        raise InvalidArgumentError(f"cannot split {n} segments into {k} blocks")
    rng = np.random.default_rng(seed)
    limit = balance_limit(n, k, epsilon)
    g0 = _undirected(net)
    levels = [(g0, None)]
    g = g0
    max_vw = max(1, limit // 4)
    while g.n > max(30 * k, 60):
        gc, cmap = _coarsen(g, rng, max_vw)
        if gc.n > 0.9 * g.n:
            break
        levels.append((gc, cmap))
        g = gc
    coarse = levels[-1][0]
    target = sum(coarse.vw) / k
    best = None
    for _ in range(trials):
        part = _grow(coarse, k, rng, target)
        part = _refine(coarse, part, k, limit)
        key = (_overweight(coarse, part, k, limit), _cut(coarse, part))
        if best is None or key < best[0]:
            best = (key, part)
    part = best[1]
    for level in range(len(levels) - 1, 0, -1):
        finer, _ = levels[level - 1]
        cmap = levels[level][1]
        part = [part[cmap[u]] for u in range(finer.n)]
        part = _refine(finer, part, k, limit)
    part = _rebalance(g0, part, k, limit)
    part = _refine(g0, part, k, limit)
    part = _fill_empty(g0, part, k)
    ids = net.ids
    assignment = {ids[u]: int(part[u]) for u in range(n)}
    p = Partition(k, assignment, epsilon, cut=directed_cut(net, assignment))
    check_partition(p, net)
    return p


def _overweight(g, part, k, limit):
    w = [0] * k
    for u in range(g.n):
        w[part[u]] += g.vw[u]
    return sum(max(0, x - limit) for x in w) + sum(1 for x in w if x == 0)


def _fill_empty(g, part, k):
    sizes = Counter(part)
    for b in range(k):
        if sizes.get(b, 0) == 0:
            donor = max(range(k), key=lambda x: (sizes.get(x, 0), -x))
            u = max(u for u in range(g.n) if part[u] == donor)
            part[u] = b
            sizes[donor] -= 1
            sizes[b] = 1
    return part


def directed_cut(net, assignment):
    return sum(1 for a, b in net.edges() if assignment[a] != assignment[b])


def check_partition(p, net):
    """Assert the partition contract: full coverage, non-empty blocks, balance."""
    if set(p.assignment) != set(net.index):
        raise AssertionError("partition does not cover every segment exactly once")
    sizes = p.block_sizes()
    if any(s == 0 for s in sizes):
        raise AssertionError(f"empty block in {sizes}")
    if max(sizes) > p.max_block():
        raise AssertionError(f"block size {max(sizes)} exceeds limit {p.max_block()}")
    if any(not 0 <= r < p.k for r in p.assignment.values()):
        raise AssertionError("region id out of range")


def mapping_matrix(p, net=None):
    """Sparse 0/1 matrix (segments x regions); row order follows ``net`` (or sorted ids)."""
    ids = net.ids if net is not None else sorted(p.assignment)
    rows = np.arange(len(ids))
    cols = np.array([p.assignment[s] for s in ids])
    return sp.csr_matrix((np.ones(len(ids)), (rows, cols)), shape=(len(ids), p.k))


# -- boundary segments ----------------------------------------------------------------------

def boundary_sets(net, p, corpus=()):
    """Entry segments per ordered region pair with historical crossing counts.

    For ``(r_i, r_j)`` the set holds every segment ``b`` in ``r_j`` having a
    predecessor in ``r_i``; the count is how often a corpus trajectory moved
    into ``b`` from ``r_i``. Zero-count boundaries are kept.
    """
    counts = defaultdict(Counter)
    for a, b in net.edges():
        ra, rb = p.region_of(a), p.region_of(b)
        if ra != rb:
            counts[(ra, rb)][b] += 0
    for t in corpus:
        for s in t.segments:
            if s not in p.assignment:
                raise MissingSegmentError(f"corpus trajectory {t.tid} uses unknown segment {s}")
        for a, b in zip(t.segments, t.segments[1:]):
            ra, rb = p.assignment[a], p.assignment[b]
            if ra != rb:
                counts[(ra, rb)][b] += 1
    return {key: sorted(c.items()) for key, c in sorted(counts.items())}


def sample_boundary(boundaries, ri, rj, rng):
    """Boundary segment for ``ri -> rj`` drawn proportionally to ``count + 1``."""
    entries = boundaries.get((ri, rj))
    if not entries:
        raise MappingError(f"no boundary segment between regions {ri} and {rj}")
    w = np.array([c + 1.0 for _, c in entries])
    return entries[int(rng.choice(len(entries), p=w / w.sum()))][0]


def region_network(net, p, boundaries=None):
    """Region graph as a :class:`RoadNetwork` whose "segments" are regions.

    Region attributes: total length, mean speed, centroid. The context
    features hold normalized centroid lat/lon, segment count and total
    length; the remaining attribute slots are zero.
    """
    boundaries = boundary_sets(net, p) if boundaries is None else boundaries
    members = defaultdict(list)
    for s, r in p.assignment.items():
        members[r].append(net.segment(s))
    segs = []
    feats = np.zeros((p.k, 8))
    for r in range(p.k):
        ms = members[r]
        lat = float(np.mean([m.lat for m in ms]))
        lon = float(np.mean([m.lon for m in ms]))
        total = float(sum(m.length for m in ms))
        speed = float(np.mean([m.max_speed for m in ms]))
        segs.append(RoadSegment(r, total, 1.0, speed, 1, 0, lat, lon))
        feats[r, :4] = (lat, lon, len(ms), total)
    for c in range(4):
        col = feats[:, c]
        span = col.max() - col.min()
        feats[:, c] = (col - col.min()) / span if span > 0 else 0.0
    adjacency = defaultdict(list)
    for (ri, rj), entries in boundaries.items():
        if entries:
            adjacency[ri].append(rj)
    rnet = RoadNetwork(tuple(segs), dict(adjacency), features=feats)
    return rnet


def map_traj_to_regions(p, traj):
    """Region sequence of ``traj`` with consecutive repeats collapsed (first-entry timestamps)."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    regions, times = [], []
    for s, t in zip(traj.segments, traj.times):
        r = p.region_of(s)
        if not regions or regions[-1] != r:
            regions.append(r)
            times.append(t)
    return Trajectory(regions, times, tid=traj.tid)


# -- files -----------------------------------------------------------------------------------

def dumps_partition(p, net=None):
    ids = net.ids if net is not None else sorted(p.assignment)
    return "".join(f"{s},{p.assignment[s]}\n" for s in ids)


def parse_partition(text, epsilon=0.03):
    assignment = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        try:
            s, r = (int(x) for x in line.split(","))
        except ValueError:
            raise NetworkParseError("expected segment_id,region_id", lineno) from None
        assignment[s] = r
    k = max(assignment.values()) + 1 if assignment else 0
    return Partition(k, assignment, epsilon)


def dumps_boundaries(boundaries):
    lines = []
    for (ri, rj), entries in sorted(boundaries.items()):
        for s, c in entries:
            lines.append(f"{ri},{rj},{s},{c}\n")
    return "".join(lines)


def parse_boundaries(text):
    out = defaultdict(list)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        try:
            ri, rj, s, c = (int(x) for x in line.split(","))
        except ValueError:
            raise NetworkParseError("expected r_i,r_j,segment_id,count", lineno) from None
        out[(ri, rj)].append((s, c))
    return {k: sorted(v) for k, v in sorted(out.items())}
