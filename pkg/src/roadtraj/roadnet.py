"""Road network model: attributed segments, directed segment adjacency, geometry.

The network is segment-centric: every node is a directed road segment and an
edge ``a -> b`` means a vehicle on ``a`` may continue onto ``b``.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .exceptions import (
    InvalidCoordinateError,
    InvalidSizeError,
    MissingSegmentError,
    NetworkParseError,
    ReferentialIntegrityError,
)

EARTH_RADIUS_M = 6_371_000.0


def _check_latlon(lat, lon):
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise InvalidCoordinateError(f"non-finite coordinate ({lat}, {lon})")
    if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
        raise InvalidCoordinateError(f"coordinate out of range ({lat}, {lon})")


def haversine_distance(a, b):
    """Great-circle distance in meters between two ``(lat, lon)`` pairs in degrees."""
    lat1, lon1 = float(a[0]), float(a[1])
    lat2, lon2 = float(b[0]), float(b[1])
    _check_latlon(lat1, lon1)
    _check_latlon(lat2, lon2)
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    s = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))


def haversine_matrix(lat1, lon1, lat2, lon2):
    """Pairwise haversine distances (meters) between two coordinate arrays (degrees).

    Returns an array of shape ``(len(lat1), len(lat2))``.
    """
    p1 = np.radians(np.asarray(lat1, dtype=float))[:, None]
    p2 = np.radians(np.asarray(lat2, dtype=float))[None, :]
    l1 = np.radians(np.asarray(lon1, dtype=float))[:, None]
    l2 = np.radians(np.asarray(lon2, dtype=float))[None, :]
    s = np.sin((p2 - p1) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin((l2 - l1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(s)))


@dataclass(frozen=True)
class RoadSegment:
    id: int
    length: float
    width: float
    max_speed: float
    lanes: int
    road_type: int
    lat: float
    lon: float

    def __post_init__(self):
        _check_latlon(self.lat, self.lon)
        for name in ("length", "width", "max_speed"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"segment {self.id}: {name} must be finite and > 0, got {v}")
        if int(self.lanes) != self.lanes or self.lanes < 1:
            raise ValueError(f"segment {self.id}: lanes must be a positive integer")
        if int(self.road_type) != self.road_type or self.road_type < 0:
            raise ValueError(f"segment {self.id}: road_type must be a non-negative integer")

    @property
    def midpoint(self):
        return (self.lat, self.lon)


@dataclass(frozen=True, eq=False)
class RoadNetwork:
    """Immutable directed segment graph.

    ``closed`` holds segments that stay in the graph but are excluded from
    candidate sets at search time. Use :func:`apply_closures` to derive a view
    with extra closures; the base network is never mutated.

    ``features`` optionally overrides :meth:`context_matrix` (used by the
    region-level network, whose "segments" are regions).
    """

    segments: tuple
    adjacency: Mapping
    closed: frozenset = frozenset()
    features: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ids = [s.id for s in self.segments]
        if len(set(ids)) != len(ids):
            raise ReferentialIntegrityError("duplicate segment id")
        known = set(ids)
        adj = {}
        for src, dsts in self.adjacency.items():
            if src not in known:
                raise ReferentialIntegrityError(f"adjacency source {src} is not a segment")
            for d in dsts:
                if d not in known:
                    raise ReferentialIntegrityError(f"adjacency {src}->{d}: unknown segment {d}")
            adj[src] = tuple(sorted(set(dsts)))
        for sid in ids:
            adj.setdefault(sid, ())
        bad = set(self.closed) - known
        if bad:
            raise ReferentialIntegrityError(f"closed ids not in network: {sorted(bad)}")
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "closed", frozenset(self.closed))
        if self.features is not None and len(self.features) != len(ids):
            raise ValueError("features row count must match segment count")

    # -- indexing -----------------------------------------------------------
    def __len__(self):
        return len(self.segments)

    def __contains__(self, sid):
        return sid in self.index

    @property
    def ids(self):
        return [s.id for s in self.segments]

    @property
    def index(self):
        """Map segment id -> row position."""
        idx = self._cache.get("index")
        if idx is None:
            idx = {s.id: i for i, s in enumerate(self.segments)}
            self._cache["index"] = idx
        return idx

    def row(self, sid):
        try:
            return self.index[sid]
        except KeyError:
            raise MissingSegmentError(f"unknown segment id {sid}") from None

    def segment(self, sid):
        return self.segments[self.row(sid)]

    def successors(self, sid):
        if sid not in self.index:
            raise MissingSegmentError(f"unknown segment id {sid}")
        return self.adjacency[sid]

    def open_successors(self, sid):
        succ = self.successors(sid)
        if not self.closed:
            return succ
        return tuple(s for s in succ if s not in self.closed)

    def is_adjacent(self, a, b):
        return b in self.adjacency.get(a, ())

    def predecessors(self, sid):
        pred = self._cache.get("pred")
        if pred is None:
            pred = {s: [] for s in self.index}
            for a, bs in self.adjacency.items():
                for b in bs:
                    pred[b].append(a)
            pred = {k: tuple(sorted(v)) for k, v in pred.items()}
            self._cache["pred"] = pred
        if sid not in pred:
            raise MissingSegmentError(f"unknown segment id {sid}")
        return pred[sid]

    def edges(self):
        for a in self.ids:
            for b in self.adjacency[a]:
                yield a, b

    def n_edges(self):
        return sum(len(v) for v in self.adjacency.values())

    # -- attribute arrays -----------------------------------------------------
    def _array(self, name):
        key = "arr_" + name
        arr = self._cache.get(key)
        if arr is None:
            arr = np.array([getattr(s, name) for s in self.segments], dtype=float)
            arr.setflags(write=False)
            self._cache[key] = arr
        return arr

    @property
    def lengths(self):
        return self._array("length")

    @property
    def speeds(self):
        return self._array("max_speed")

    @property
    def lats(self):
        return self._array("lat")

    @property
    def lons(self):
        return self._array("lon")

    def distance_matrix(self):
        """Haversine distances between all segment midpoints (cached)."""
        d = self._cache.get("dist")
        if d is None:
            d = haversine_matrix(self.lats, self.lons, self.lats, self.lons)
            d.setflags(write=False)
            self._cache["dist"] = d
        return d

    def travel_seconds(self, sid):
        seg = self.segment(sid)
        return seg.length / (seg.max_speed / 3.6)

    def context_matrix(self):
        """Context vectors of all segments, one row per segment (cached)."""
        if self.features is not None:
            return np.asarray(self.features, dtype=float)
        cm = self._cache.get("context")
        if cm is None:
            cm = _build_context(self)
            cm.setflags(write=False)
            self._cache["context"] = cm
        return cm

    def digest(self):
        """Stable content hash, used in checkpoint metadata."""
        h = self._cache.get("digest")
        if h is None:
            h = hashlib.sha256(dumps_network(self).encode("utf-8")).hexdigest()[:16]
            self._cache["digest"] = h
        return h

    def hop_distances_to(self, dest, respect_closures=True):
        """Breadth-first hop counts from every segment to ``dest`` (missing = unreachable)."""
        self.row(dest)
        out = {dest: 0}
        q = deque([dest])
        while q:
            b = q.popleft()
            for a in self.predecessors(b):
                if a in out:
                    continue
                if respect_closures and a in self.closed:
                    continue
                out[a] = out[b] + 1
                q.append(a)
        return out


def _minmax(x):
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi - lo <= 0:
        return np.zeros_like(x, dtype=float)
    return (x - lo) / (hi - lo)


def _build_context(net):
    segs = net.segments
    cont = [_minmax(np.array([getattr(s, a) for s in segs], dtype=float))
            for a in ("length", "width", "max_speed")]
    n_types = max(s.road_type for s in segs) + 1
    n_lanes = max(s.lanes for s in segs)
    types = np.zeros((len(segs), n_types))
    types[np.arange(len(segs)), [s.road_type for s in segs]] = 1.0
    lanes = np.zeros((len(segs), n_lanes))
    lanes[np.arange(len(segs)), [s.lanes - 1 for s in segs]] = 1.0
    lat = _minmax(net.lats)
    lon = _minmax(net.lons)
    return np.column_stack(cont + [lanes, types, lat, lon])


def context_vector(net, sid):
    """Encoded attributes of one segment.

    Layout: min-max normalized length, width, max speed; one-hot lanes
    (1..max lanes); one-hot road type (0..max type); normalized lat, lon.
    """
    return net.context_matrix()[net.row(sid)].copy()


def apply_closures(net, closed):
    """Return a view of ``net`` with ``closed`` segments added to its closure set."""
    closed = frozenset(closed)
    unknown = [c for c in closed if c not in net.index]
    if unknown:
        raise MissingSegmentError(f"cannot close unknown segments {sorted(unknown)}")
    if not closed:
        return net
    view = RoadNetwork(net.segments, net.adjacency, net.closed | closed, net.features)
    for key in ("index", "pred", "arr_length", "arr_max_speed", "arr_lat", "arr_lon",
                "dist", "context"):
        if key in net._cache:
            view._cache[key] = net._cache[key]
    return view


# -- file format ---------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def dumps_network(net):
    lines = ["#segments"]
    for s in net.segments:
        lines.append(",".join([str(s.id), _fmt(s.length), _fmt(s.width), _fmt(s.max_speed),
                               str(s.lanes), str(s.road_type), _fmt(s.lat), _fmt(s.lon)]))
    lines.append("#edges")
    for a, b in net.edges():
        lines.append(f"{a},{b}")
    return "\n".join(lines) + "\n"


def save_network(net, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_network(net))


def parse_network(text):
    section = None
    segments = []
    adjacency = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("#"):
            name = line[1:].strip().lower()
            if name not in ("segments", "edges"):
                raise NetworkParseError(f"unknown section {line!r}", lineno)
            section = name
            continue
        parts = [p.strip() for p in line.split(",")]
        if section is None:
            raise NetworkParseError("data before any section header", lineno)
        try:
            if section == "segments":
                if len(parts) != 8:
                    raise ValueError(f"expected 8 fields, got {len(parts)}")
                sid, length, width, speed, lanes, rtype, lat, lon = parts
                segments.append(RoadSegment(int(sid), float(length), float(width), float(speed),
                                            int(lanes), int(rtype), float(lat), float(lon)))
            else:
                if len(parts) != 2:
                    raise ValueError(f"expected 2 fields, got {len(parts)}")
                adjacency.setdefault(int(parts[0]), []).append(int(parts[1]))
        except InvalidCoordinateError as exc:
            raise InvalidCoordinateError(f"line {lineno}: {exc}") from None
        except ValueError as exc:
            raise NetworkParseError(str(exc), lineno) from None
    if not segments:
        raise NetworkParseError("no segments defined")
    return RoadNetwork(tuple(segments), adjacency)


def load_network(path):
    """Read a network from the line-oriented segment/edge text format."""
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())


# -- synthetic networks ---------------------------------------------------------

def synth_grid(rows, cols, one_way_fraction=0.0, seed=0, *, origin=(39.90, 116.38),
               spacing_m=200.0):
    """Grid city with one segment per directed street block.

    Successors of a block ``u -> v`` are the blocks leaving ``v``; the U-turn
    ``v -> u`` is only allowed when it is the only way out of ``v``.
    """
    if rows < 2 or cols < 2:
        raise InvalidSizeError(f"grid needs rows, cols >= 2, got {rows}x{cols}")
    if not 0.0 <= one_way_fraction <= 1.0:
        raise InvalidSizeError("one_way_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    lat0, lon0 = origin
    dlat = spacing_m / (math.pi * EARTH_RADIUS_M / 180.0)
    dlon = dlat / math.cos(math.radians(lat0))
    jitter = rng.uniform(-0.15, 0.15, size=(rows, cols, 2))
    node_lat = lat0 + (np.arange(rows)[:, None] + jitter[..., 0]) * dlat
    node_lon = lon0 + (np.arange(cols)[None, :] + jitter[..., 1]) * dlon

    blocks = []
    for r in range(rows):
        for c in range(cols - 1):
            blocks.append(((r, c), (r, c + 1)))
    for r in range(rows - 1):
        for c in range(cols):
            blocks.append(((r, c), (r + 1, c)))

    directed = []
    for u, v in blocks:
        road_type = int(rng.integers(0, 4))
        lanes = int(rng.integers(1, 4))
        width = float(rng.uniform(2.8, 3.8)) * lanes
        speed = float((30.0, 40.0, 60.0, 80.0)[road_type])
        curvature = float(rng.uniform(1.0, 1.3))
        one_way = rng.random() < one_way_fraction
        flip = rng.random() < 0.5
        pairs = [(u, v), (v, u)]
        if one_way:
            pairs = [pairs[1] if flip else pairs[0]]
        for a, b in pairs:
            directed.append((a, b, road_type, lanes, width, speed, curvature))

    segments = []
    starts = {}
    for i, (a, b, road_type, lanes, width, speed, curvature) in enumerate(directed):
        straight = haversine_distance((node_lat[a], node_lon[a]), (node_lat[b], node_lon[b]))
        segments.append(RoadSegment(
            id=i, length=straight * curvature, width=width, max_speed=speed, lanes=lanes,
            road_type=road_type,
            lat=float((node_lat[a] + node_lat[b]) / 2), lon=float((node_lon[a] + node_lon[b]) / 2)))
        starts.setdefault(a, []).append(i)

    adjacency = {}
    for i, (a, b, *_rest) in enumerate(directed):
        out = [j for j in starts.get(b, []) if directed[j][1] != a]
        if not out:
            out = list(starts.get(b, []))
        adjacency[i] = out
    return RoadNetwork(tuple(segments), adjacency)


def shortest_length_path(net, source, dest, allowed=None):
    """Dijkstra by segment length; returns the segment list or ``None``.

    Entering segment ``b`` costs its length. Closed segments are avoided.
    """
    net.row(source)
    net.row(dest)
    lengths = {s.id: s.length for s in net.segments}
    dist = {source: 0.0}
    prev = {}
    heap = [(0.0, source)]
    done = set()
    while heap:
        d, a = heapq.heappop(heap)
        if a in done:
            continue
        done.add(a)
        if a == dest:
            path = [a]
            while path[-1] != source:
                path.append(prev[path[-1]])
            return path[::-1]
        for b in net.open_successors(a):
            if allowed is not None and b not in allowed:
                continue
            nd = d + lengths[b]
            if nd < dist.get(b, math.inf):
                dist[b] = nd
                prev[b] = a
                heapq.heappush(heap, (nd, b))
    return None


def validate_network(net: RoadNetwork) -> None:
    """Exhaustively re-check referential integrity (every successor exists)."""
    known = set(net.index)
    for a, bs in net.adjacency.items():
        if a not in known:
            raise ReferentialIntegrityError(f"dangling source {a}")
        for b in bs:
            if b not in known:
                raise ReferentialIntegrityError(f"dangling successor {a}->{b}")

