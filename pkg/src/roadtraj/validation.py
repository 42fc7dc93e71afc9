"""Input validation helpers shared by the estimator wrappers and the CLI."""

from __future__ import annotations

import numbers

from sklearn.utils import check_scalar as _sk_check_scalar

from .exceptions import EmptyCorpusError, InvalidArgumentError
from .roadnet import RoadNetwork
from .trajectory import Trajectory, check_continuous, check_trajectory_segments


def check_network(net):
    if not isinstance(net, RoadNetwork):
        raise InvalidArgumentError(f"expected a RoadNetwork, got {type(net).__name__}")
    if len(net) == 0:
        raise InvalidArgumentError("network has no segments")
    return net


def check_trajectories(trajs, net=None, *, continuous=False, min_length=1, allow_empty=False):
    """Materialize ``trajs`` as a list of :class:`Trajectory`, validating against ``net``."""
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    out = []
    for t in trajs:
        if not isinstance(t, Trajectory):
            t = Trajectory(*t) if isinstance(t, tuple) and len(t) == 2 else None
        if t is None:
            raise InvalidArgumentError("items must be Trajectory objects or (segments, times) pairs")
        if len(t) < min_length:
            raise InvalidArgumentError(f"trajectory {t.tid} shorter than {min_length}")
        out.append(t)
    if not out and not allow_empty:
        raise EmptyCorpusError("no trajectories given")
    if net is not None:
        check_trajectory_segments(out, net)
        if continuous:
            for t in out:
                check_continuous(t, net, closed_ok=True)
    return out


def check_scalar(x, name, *, target_type=numbers.Real, min_val=None, max_val=None,
                 include_min=True, include_max=True):
    """``sklearn.utils.check_scalar`` that also rejects bools and raises :class:`InvalidArgumentError`."""
    if isinstance(x, bool):
        raise InvalidArgumentError(f"{name} must be {target_type}, got bool")
    closed = {(True, True): "both", (True, False): "left", (False, True): "right", (False, False): "neither"}
    try:
        return _sk_check_scalar(x, name, target_type, min_val=min_val, max_val=max_val,
                                include_boundaries=closed[(include_min, include_max)])
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(str(exc)) from None


def check_od_tasks(tasks, net):
    """List of ``(origin, destination, start_time)`` with known segment ids."""
    out = []
    for task in tasks:
        try:
            o, d, t = task
        except (TypeError, ValueError):
            raise InvalidArgumentError("OD tasks must be (origin, destination, start_time) triples") from None
        net.row(o)
        net.row(d)
        out.append((int(o), int(d), float(t)))
    return out
