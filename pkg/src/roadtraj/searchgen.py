"""Generation engines: OD sampling, best-first search, the stochastic baseline, two-stage generation."""

from __future__ import annotations

import heapq
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DeadEndError, EmptyCorpusError, MappingError, NetworkParseError, RoadTrajError,
    SearchBudgetError, TwoStageError, UnreachableError,
)
from .regions import map_traj_to_regions, sample_boundary
from .roadnet import apply_closures  # noqa: F401  re-exported for scenario handling
from .trajectory import Trajectory, check_continuous, encode_time, slot_bucket, slot_start_timestamp

log = logging.getLogger(__name__)

BUCKET_MINUTES = 30


# -- OD matrix -------------------------------------------------------------------------

@dataclass
class ODMatrix:
    """Counts keyed by ``(origin, destination, start-slot bucket)``."""

    counts: dict
    bucket_minutes: int = BUCKET_MINUTES
    utc_offset_hours: float = 0.0
    _keys: list = field(default=None, repr=False)

    def __post_init__(self):
        if any(c < 1 for c in self.counts.values()):
            raise ValueError("OD counts must be >= 1")
        self._keys = sorted(self.counts)

    @property
    def total(self):
        return sum(self.counts.values())

    def __len__(self):
        return len(self.counts)


def build_od_matrix(corpus, bucket_minutes=BUCKET_MINUTES, utc_offset_hours=0.0):
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpusError("cannot build an OD matrix from an empty corpus")
    counts = Counter()
    for t in corpus:
        if len(t) == 0:
            raise ValueError("corpus trajectories must be non-empty")
        b = slot_bucket(encode_time(t.times[0], utc_offset_hours), bucket_minutes)
        counts[(t.origin, t.destination, b)] += 1
    return ODMatrix(dict(counts), bucket_minutes, utc_offset_hours)


def sample_od(od, rng):
    """Draw ``(l_s, l_d, t_s)``: key proportional to count, ``t_s`` uniform inside its bucket."""
    if not od.counts:
        raise EmptyCorpusError("empty OD matrix")
    keys = od._keys
    w = np.array([od.counts[k] for k in keys], dtype=float)
    o, d, b = keys[int(rng.choice(len(keys), p=w / w.sum()))]
    t0 = slot_start_timestamp(b * od.bucket_minutes + 1, od.utc_offset_hours)
    return o, d, t0 + float(rng.integers(0, od.bucket_minutes * 60))


# -- policies ------------------------------------------------------------------------------

class UniformPolicy:
    """Equal-probability ``g`` with ``h == 0``: every step costs ``ln(max out-degree)``.

    A constant per-step cost turns best-first search into breadth-first
    search, which makes this the reference policy for hop-count checks.
    """

    def __init__(self, net):
        self.net = net
        degree = max(len(net.successors(s)) for s in net.ids)
        self.step_cost = math.log(max(degree, 1)) or 1.0

    def begin(self, segments, times):
        return None

    def advance(self, state, segment, t):
        return None

    def step_costs(self, state, candidates, dest):
        return np.full(len(candidates), self.step_cost)


# -- best-first search ------------------------------------------------------------------------

@dataclass
class _Node:
    """Search node: a continuous partial trajectory ending at ``seg``."""

    seg: int
    t: float
    parent: object
    state: object
    cost: float
    hops: int


def _unwind(node):
    segs, times = [], []
    while node is not None:
        segs.append(node.seg)
        times.append(node.t)
        node = node.parent
    return segs[::-1], times[::-1]


def _search(model, net, prefix_segs, prefix_times, dest, budget, *, allowed=None, state=None,
            trace=None):
    """Best-first search from the end of a prefix; returns ``(segs, times, cost, expansions, state)``.

    ``segs``/``times`` exclude the prefix. The node ordering is (accumulated
    f, hops, last segment id, insertion order). A segment is closed the
    first time it is popped; prefix segments start closed.
    """
    start = prefix_segs[-1]
    if start in net.closed or dest in net.closed:
        raise UnreachableError(f"origin {start} or destination {dest} is closed", 0)
    if state is None:
        state = model.begin(prefix_segs, prefix_times)
    if start == dest:
        return [], [], 0.0, 0, state
    if allowed is None and start not in net.hop_distances_to(dest):
        raise UnreachableError(f"destination {dest} is unreachable from {start}", 0)
    closed = set(prefix_segs[:-1])
    root = _Node(start, prefix_times[-1], None, state, 0.0, 0)
    heap = [(0.0, 0, start, 0, root)]
    counter = 1
    expansions = 0
    while heap:
        cost, hops, seg, _, node = heapq.heappop(heap)
        if seg in closed:
            continue
        closed.add(seg)
        if trace is not None:
            trace.append(cost)
        if node.state is None and node.parent is not None:
            node.state = model.advance(node.parent.state, seg, node.t)
        if seg == dest:
            segs, times = _unwind(node)
            return segs[1:], times[1:], cost, expansions, node.state
        if expansions >= budget:
            raise SearchBudgetError(f"search budget of {budget} expansions exhausted", expansions)
        expansions += 1
        cands = [c for c in net.open_successors(seg)
                 if c not in closed and (allowed is None or c in allowed or c == dest)]
        if not cands:
            continue
        f = model.step_costs(node.state, cands, dest)
        for c, fc in zip(cands, f):
            child = _Node(c, node.t + net.travel_seconds(c), node, None, cost + float(fc), hops + 1)
            heapq.heappush(heap, (child.cost, child.hops, c, counter, child))
            counter += 1
    raise UnreachableError(f"destination {dest} is unreachable from {start}", expansions)


def astar_generate(model, net, l_s, l_d, t_s, budget=10_000, *, allowed=None):
    """Least-cost continuous trajectory from ``l_s`` to ``l_d`` under accumulated ``f = g + h``.

    ``info`` records ``expansions`` and the accumulated ``cost``.
    """
    net.row(l_s)
    net.row(l_d)
    segs, times, cost, expansions, _ = _search(model, net, [l_s], [float(t_s)], l_d, budget,
                                               allowed=allowed)
    traj = Trajectory([l_s] + segs, [float(t_s)] + times,
                      info={"expansions": expansions, "cost": cost, "engine": "astar"})
    check_continuous(traj, net)
    return traj


def popped_costs(model, net, l_s, l_d, t_s, budget=10_000):
    """Accumulated costs of closed nodes in pop order (diagnostics for monotonicity)."""
    trace = []
    _search(model, net, [l_s], [float(t_s)], l_d, budget, trace=trace)
    return trace


# -- stochastic baseline -----------------------------------------------------------------------

def stochastic_generate(model, net, l_s, l_d, t_s, max_steps=200, rng=None):
    """Sample successors from ``softmax(-f)`` until ``l_d`` or ``max_steps``.

    Returns a partial trajectory (``info["partial"] = True``) on a dead end or
    when the step limit is hit.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    net.row(l_s)
    segs, times = [l_s], [float(t_s)]
    state = model.begin(segs, times)
    partial = l_s != l_d
    logps = []
    for _ in range(max_steps):
        if segs[-1] == l_d:
            partial = False
            break
        cands = net.open_successors(segs[-1])
        if not cands:
            log.debug("dead end at %s", segs[-1])
            break
        f = model.step_costs(state, cands, l_d)
        score = -np.asarray(f, dtype=float)
        logp = score - np.logaddexp.reduce(score)
        p = np.exp(logp)
        k = int(rng.choice(len(cands), p=p / p.sum()))
        nxt = cands[k]
        logps.append(float(logp[k]))
        segs.append(nxt)
        times.append(times[-1] + net.travel_seconds(nxt))
        state = model.advance(state, nxt, times[-1])
    else:
        partial = segs[-1] != l_d
    traj = Trajectory(segs, times, info={"partial": partial, "engine": "stochastic",
                                            "target": l_d, "logp": tuple(logps)})
    check_continuous(traj, net)
    return traj


# -- two-stage generation --------------------------------------------------------------------

def map_regional_trajectory(regional, l_s, l_d, boundaries, rng):
    """Skeleton ``l_s, b_1, ..., b_{n-1}, l_d`` with boundaries drawn by smoothed frequency."""
    regions = regional.segments if isinstance(regional, Trajectory) else tuple(regional)
    if not regions:
        raise MappingError("regional trajectory is empty")
    skeleton = [l_s]
    for ri, rj in zip(regions, regions[1:]):
        skeleton.append(sample_boundary(boundaries, ri, rj, rng))
    skeleton.append(l_d)
    return skeleton


@dataclass
class Budgets:
    region: int = 5_000
    leg: int = 5_000


def two_stage_generate(road_model, region_model, net, partition, boundaries, od, rng, budgets=None):
    """Region-level skeleton search, then road-level completion leg by leg.

    Each leg searches only the two regions it bridges; a leg that fails
    there is retried on the whole network. ``info`` carries the total
    expansion count (both stages), the regional trajectory and the skeleton.
    """
    budgets = budgets or Budgets()
    l_s, l_d, t_s = od
    r_s, r_d = partition.region_of(l_s), partition.region_of(l_d)
    rnet = region_model.net
    try:
        if r_s == r_d:
            regional = Trajectory([r_s], [float(t_s)])
            r_exp = 0
        else:
            regional = astar_generate(region_model, rnet, r_s, r_d, t_s, budgets.region)
            r_exp = regional.info["expansions"]
    except RoadTrajError as exc:
        raise TwoStageError(f"region stage failed: {exc}", "region",
                            getattr(exc, "expansions", 0)) from exc
    try:
        skeleton = map_regional_trajectory(regional, l_s, l_d, boundaries, rng)
    except MappingError as exc:
        raise TwoStageError(f"skeleton mapping failed: {exc}", "mapping", r_exp) from exc
    segs, times = [l_s], [float(t_s)]
    state = road_model.begin(segs, times)
    expansions = r_exp
    fallbacks = 0
    members = {}
    for leg, (a, b) in enumerate(zip(skeleton, skeleton[1:])):
        if segs[-1] == b:
            continue
        ra, rb = partition.region_of(segs[-1]), partition.region_of(b)
        for r in (ra, rb):
            if r not in members:
                members[r] = frozenset(partition.members(r))
        allowed = members[ra] | members[rb]
        final = leg == len(skeleton) - 2
        try:
            found, ft, _, e, state_new = _search(road_model, net, segs, times, b, budgets.leg,
                                                 allowed=allowed, state=state)
        except (SearchBudgetError, UnreachableError) as exc:
            expansions += exc.expansions
            fallbacks += 1
            target = b if final else l_d
            try:
                found, ft, _, e, state_new = _search(road_model, net, segs, times, target,
                                                     budgets.leg, state=state)
            except (SearchBudgetError, UnreachableError) as exc2:
                raise TwoStageError(f"leg {leg} ({segs[-1]} -> {b}) failed: {exc2}", leg,
                                    expansions + exc2.expansions) from exc2
            expansions += e
            segs += found
            times += ft
            state = state_new
            break
        expansions += e
        segs += found
        times += ft
        state = state_new
    if segs[-1] != l_d:
        raise TwoStageError(f"did not reach destination {l_d}", len(skeleton) - 1, expansions)
    traj = Trajectory(segs, times, info={
        "expansions": expansions, "engine": "two_stage", "regions": tuple(regional.segments),
        "skeleton": tuple(skeleton), "fallbacks": fallbacks})
    check_continuous(traj, net)
    return traj


def region_corpus(corpus, partition):
    """Regional trajectories for training the region-level model (length >= 2 only)."""
    out = []
    for t in corpus:
        r = map_traj_to_regions(partition, t)
        if len(r) >= 2 and not r.has_loop():
            out.append(r)
    return out


# -- batched generation ------------------------------------------------------------------------

def task_rng(seed, task_id):
    """Independent random stream per generation task."""
    return np.random.default_rng([int(seed), int(task_id)])


def generate_tasks(od, n, seed):
    """``n`` sampled ``(l_s, l_d, t_s)`` tasks, each from its own stream."""
    return [sample_od(od, task_rng(seed, i)) for i in range(n)]


def run_engine(mode, task, rng, *, road_model, net, region_model=None, partition=None,
               boundaries=None, budget=10_000, max_steps=None):
    l_s, l_d, t_s = task
    if mode == "astar":
        return astar_generate(road_model, net, l_s, l_d, t_s, budget)
    if mode == "stochastic":
        if max_steps is None:
            hops = net.hop_distances_to(l_d).get(l_s)
            max_steps = 3 * hops if hops else 200
        return stochastic_generate(road_model, net, l_s, l_d, t_s, max_steps, rng)
    if mode == "two-stage":
        return two_stage_generate(road_model, region_model, net, partition, boundaries, task, rng,
                                  Budgets(budget, budget))
    raise ValueError(f"unknown generation mode {mode!r}")


def generate_many(mode, od, n, seed, *, retries=3, **engine_kw):
    """Generate ``n`` trajectories; failed tasks are resampled up to ``retries`` times.

    Returns ``(trajectories, failures)``; trajectory ids are task indices.
    """
    out, failures = [], []
    net = engine_kw["net"]
    for i in range(n):
        rng = task_rng(seed, i)
        task = sample_od(od, rng)
        for attempt in range(retries + 1):
            try:
                if task[0] in net.closed or task[1] in net.closed:
                    raise UnreachableError("task endpoint is closed", 0)
                t = run_engine(mode, task, rng, **engine_kw)
                out.append(Trajectory(t.segments, t.times, tid=i, info=t.info))
                break
            except (RoadTrajError, DeadEndError) as exc:
                log.info("task %d attempt %d failed: %s", i, attempt, exc)
                if attempt == retries:
                    failures.append((i, task, str(exc)))
                else:
                    task = sample_od(od, rng)
    return out, failures


# -- closure scenarios -------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    label: str
    closed: frozenset


def parse_scenario(text):
    """``label <name>`` line, then closed segment ids (whitespace or comma separated)."""
    label, ids = None, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("label"):
            label = line[5:].strip()
            continue
        try:
            ids.extend(int(x) for x in line.replace(",", " ").split())
        except ValueError:
            raise NetworkParseError("expected closed segment ids", lineno) from None
    if label is None:
        raise NetworkParseError("scenario needs a 'label' line", 1)
    return Scenario(label, frozenset(ids))


def load_scenario(path):
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def dumps_scenario(scenario):
    return f"label {scenario.label}\n" + "".join(f"{s}\n" for s in sorted(scenario.closed))
