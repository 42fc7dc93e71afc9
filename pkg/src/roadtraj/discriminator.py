"""Sequential discriminator and the per-step reward ``R = R_s + R_m``."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import numkernel as nk
from .exceptions import DeadEndError, MissingSegmentError
from .generator import ModelConfig
from .metrics import dtw
from .roadnet import haversine_distance
from .trajectory import N_TIME_SLOTS, Trajectory, encode_time

log = logging.getLogger(__name__)

YAW_EPS = 1e-9


class SeqDiscriminator:
    """Embedding + LSTM + linear/sigmoid head on the final hidden state."""

    def __init__(self, net, config=None, seed=0, params=None):
        self.net = net
        self.config = config or ModelConfig()
        cfg = self.config
        if params is None:
            rng = np.random.default_rng(seed)
            params = nk.ParamStore()
            params.add("seg_emb", rng.normal(0, 0.1, (len(net), cfg.d_seg)))
            params.add("time_emb", rng.normal(0, 0.1, (N_TIME_SLOTS, cfg.d_time)))
            nk.lstm_params(params, "lstm", cfg.d_seg + cfg.d_time, cfg.hidden, rng)
            params.add("head.W", rng.normal(0, 1.0 / np.sqrt(cfg.hidden), (cfg.hidden, 1)))
            params.add("head.b", np.zeros(1))
        self.params = params
        self.calls = 0

    def metadata(self):
        return {"kind": "discriminator", "network": self.net.digest(), "config": asdict(self.config)}

    def save(self, path):
        nk.save_params(self.params, path, self.metadata())

    @classmethod
    def load(cls, path, net):
        params, meta = nk.load_params(path)
        if meta.get("network") != net.digest():
            raise ValueError(f"checkpoint {path} was built for a different network")
        return cls(net, ModelConfig(**meta["config"]), params=params)

    def _encode(self, trajs):
        idx = self.net.index
        B = len(trajs)
        T = max(len(t) for t in trajs)
        rows = np.zeros((B, T), dtype=np.intp)
        slots = np.zeros((B, T), dtype=np.intp)
        mask = np.zeros((B, T))
        for b, t in enumerate(trajs):
            if len(t) == 0:
                raise ValueError("discriminator input must be non-empty")
            try:
                rows[b, :len(t)] = [idx[s] for s in t.segments]
            except KeyError as exc:
                raise MissingSegmentError(f"unknown segment id {exc.args[0]}") from None
            slots[b, :len(t)] = [encode_time(x, self.config.utc_offset_hours) - 1 for x in t.times]
            mask[b, :len(t)] = 1.0
        return rows, slots, mask

    def forward(self, trajs):
        """Logits for a batch; returns ``(logits, cache)``."""
        p = self.params
        rows, slots, mask = self._encode(trajs)
        X = np.concatenate([p["seg_emb"][rows], p["time_emb"][slots]], axis=-1)
        Hs, lstm_cache = nk.lstm_forward(p, "lstm", X, mask)
        last = Hs[:, -1]
        logits = (last @ p["head.W"] + p["head.b"])[:, 0]
        return logits, (rows, slots, mask, Hs, lstm_cache, last)

    def predict_proba(self, trajs):
        self.calls += len(trajs)
        logits, _ = self.forward(list(trajs))
        return nk.sigmoid(logits)

    def bce_step(self, trajs, labels, backward=True):
        """Mean binary cross-entropy of labels (1 = real); accumulates gradients."""
        labels = np.asarray(labels, dtype=float)
        logits, (rows, slots, mask, Hs, lstm_cache, last) = self.forward(list(trajs))
        loss = float(np.mean(-labels * nk.log_sigmoid(logits) - (1 - labels) * nk.log_sigmoid(-logits)))
        if backward:
            p = self.params
            B = len(labels)
            dlog = (nk.sigmoid(logits) - labels) / B
            p.grads["head.W"] += last.T @ dlog[:, None]
            p.grads["head.b"] += dlog.sum(keepdims=True)
            dHs = np.zeros_like(Hs)
            dHs[:, -1] = dlog[:, None] * p["head.W"][:, 0][None, :]
            dX = nk.lstm_backward(p, "lstm", dHs, lstm_cache)
            valid = mask.astype(bool)
            d = self.config.d_seg
            np.add.at(p.grads["seg_emb"], rows[valid], dX[..., :d][valid])
            np.add.at(p.grads["time_emb"], slots[valid], dX[..., d:][valid])
        return loss


def d_seq(d, traj):
    """Probability that ``traj`` is real."""
    if len(traj) == 0:
        raise ValueError("trajectory must be non-empty")
    return float(d.predict_proba([traj])[0])


# -- Monte Carlo rollouts ---------------------------------------------------------------------

def rollout_budget(net, start, dest, cap=200, factor=3):
    hops = net.hop_distances_to(dest).get(start)
    if hops is None:
        return cap
    return int(min(cap, max(1, factor * hops)))


def mc_rollout(g_old, prefix, dest, n, budget, rng, net=None):
    """Complete ``prefix`` ``n`` times by sampling ``softmax(-f)`` from ``g_old``.

    Each completion stops at ``dest`` or after ``budget`` extra steps;
    completions that do not reach ``dest`` carry ``info["partial"] = True``.
    Rollouts advance in lockstep so the LSTM runs batched.
    """
    net = net or g_old.net
    if n < 1:
        raise ValueError("need at least one rollout")
    segs = list(prefix.segments)
    times = list(prefix.times)
    if segs[-1] == dest:
        return [Trajectory(segs, times, info={"partial": False, "rollout": True}) for _ in range(n)]
    if not net.open_successors(segs[-1]):
        raise DeadEndError(f"rollout start {segs[-1]} has no open successor")
    model = g_old
    state = model.begin(segs, times)
    H = np.tile(state.h, (n, 1))
    C = np.tile(state.c, (n, 1))
    hist = [np.tile(h, (n, 1)) for h in state.hs]
    paths = [list(segs) for _ in range(n)]
    clock = [list(times) for _ in range(n)]
    active = np.ones(n, dtype=bool)
    hvec = model.h_to_dest(dest)
    W = model.params["out.W"]
    idx = net.index
    steps = 0
    while active.any() and steps < budget:
        steps += 1
        Hstack = np.stack(hist, axis=1)
        nxt_rows = np.zeros(n, dtype=np.intp)
        nxt_slots = np.zeros(n, dtype=np.intp)
        for r in np.flatnonzero(active):
            cur = paths[r][-1]
            cands = net.open_successors(cur)
            if not cands:
                active[r] = False
                continue
            hr = Hstack[r]
            if hr.shape[0] == 1:
                ht = hr[0]
            else:
                sc = hr @ hr[-1]
                a = np.exp(sc - sc.max())
                ht = (a / a.sum()) @ hr
            rows = [idx[c] for c in cands]
            logits = W[rows] @ ht
            logpg = logits - np.logaddexp.reduce(logits)
            score = logpg - hvec[rows]
            pr = np.exp(score - np.logaddexp.reduce(score))
            choice = cands[int(rng.choice(len(cands), p=pr))]
            paths[r].append(choice)
            clock[r].append(clock[r][-1] + net.travel_seconds(choice))
            if choice == dest:
                active[r] = False
                continue
            nxt_rows[r] = idx[choice]
            nxt_slots[r] = encode_time(clock[r][-1], model.config.utc_offset_hours) - 1
        if not active.any():
            break
        X = np.concatenate([model.params["seg_emb"][nxt_rows], model.params["time_emb"][nxt_slots]], axis=1)
        Hn, Cn = nk.recurrent_cell_step(model.params, "lstm", X, (H, C))
        act = active[:, None]
        H = np.where(act, Hn, H)
        C = np.where(act, Cn, C)
        hist.append(H.copy())
    return [Trajectory(p, c, info={"partial": p[-1] != dest, "rollout": True})
            for p, c in zip(paths, clock)]


def sequential_reward(d, g_old, traj, step, n, rng, *, dest=None, finished=None, budget=None,
                      completions=None):
    """Reward of the prefix ending at decision ``step`` (1-based over points after the first).

    A finished trajectory (``step == len(traj) - 1`` by default) scores
    ``d_seq(traj)`` directly with no rollouts; otherwise the mean
    discriminator score of ``n`` Monte Carlo completions.
    """
    dest = traj.destination if dest is None else dest
    if not 1 <= step <= len(traj):
        raise ValueError(f"step {step} outside 1..{len(traj)}")
    if finished is None:
        finished = step >= len(traj) - 1
    if finished:
        return d_seq(d, traj)
    if completions is None:
        prefix = Trajectory(traj.segments[:step + 1], traj.times[:step + 1])
        if budget is None:
            budget = rollout_budget(g_old.net, prefix.segments[-1], dest)
        completions = mc_rollout(g_old, prefix, dest, n, budget, rng)
    return float(np.mean(d.predict_proba(completions)))


# -- mobility yaw ---------------------------------------------------------------------------

class RealODIndex:
    """Real trajectories grouped by OD, with nearest-OD fallback."""

    def __init__(self, corpus, net, max_per_od=20):
        self.net = net
        self.by_od = {}
        for t in corpus:
            group = self.by_od.setdefault(t.od, [])
            if len(group) < max_per_od:
                group.append(t)
        self.keys = sorted(self.by_od)

    def lookup(self, od):
        if od in self.by_od:
            return self.by_od[od]
        if not self.keys:
            return []
        net = self.net
        o, d = net.segment(od[0]), net.segment(od[1])

        def gap(key):
            a, b = net.segment(key[0]), net.segment(key[1])
            return (haversine_distance(o.midpoint, a.midpoint) + haversine_distance(d.midpoint, b.midpoint), key)

        return self.by_od[min(self.keys, key=gap)]


def yaw_distance(traj, s_od, net):
    """Minimum DTW from ``traj`` to any trajectory of ``s_od``; ``None`` if ``s_od`` is empty."""
    if not s_od:
        return None
    return min(dtw(traj, r, net) for r in s_od)


def normalize_yaw_changes(dis):
    """``R_m`` per step from yaw distances ``dis_0..dis_n``.

    ``delta_i = dis_i - dis_{i-1}``; the reward is ``-delta_i`` scaled by the
    largest absolute change (plus ``1e-9``), so it lies in [-1, 1] and is
    positive when the yaw distance shrinks.
    """
    dis = np.asarray(dis, dtype=float)
    delta = np.diff(dis)
    if delta.size == 0:
        return delta
    return -delta / (np.max(np.abs(delta)) + YAW_EPS)


def mobility_yaw_reward(traj, step, s_od, net, dis=None):
    """``R_m`` at ``step`` (1-based), from precomputed ``dis`` or raw prefixes of ``traj``."""
    if not s_od:
        log.info("empty real OD set; mobility yaw reward is 0")
        return 0.0
    if dis is None:
        dis = [yaw_distance(Trajectory(traj.segments[:i + 1], traj.times[:i + 1]), s_od, net)
               for i in range(len(traj))]
    return float(normalize_yaw_changes(dis)[step - 1])


@dataclass
class RewardBundle:
    """Per-decision ``(R_s, R_m, R)`` triples."""

    seq: np.ndarray
    yaw: np.ndarray

    @property
    def total(self):
        return self.seq + self.yaw

    def __len__(self):
        return len(self.seq)

    def triples(self):
        return list(zip(self.seq.tolist(), self.yaw.tolist(), self.total.tolist()))


def combined_reward(seq, yaw=None):
    seq = np.asarray(seq, dtype=float)
    yaw = np.zeros_like(seq) if yaw is None else np.asarray(yaw, dtype=float)
    if seq.shape != yaw.shape:
        raise ValueError("reward components must align")
    return RewardBundle(seq, yaw)


def trajectory_rewards(d, g_old, traj, real_index, n, rng, *, use_yaw=True, dest=None, cap=200):
    """Full reward bundle for a generated trajectory (one entry per decision).

    Every non-final decision is scored on ``n`` rollout completions of its
    prefix; the same completions give the yaw distance (mean DTW to the real
    OD set). ``dis_0`` comes from completions of the length-1 prefix.
    """
    dest = traj.destination if dest is None else dest
    net = g_old.net
    n_dec = len(traj) - 1
    if n_dec <= 0:
        return combined_reward(np.zeros(0), np.zeros(0))
    s_od = real_index.lookup((traj.origin, dest)) if use_yaw else []
    hops = net.hop_distances_to(dest)
    seq = np.zeros(n_dec)
    dis = []

    def complete(length):
        prefix = Trajectory(traj.segments[:length], traj.times[:length])
        last = prefix.segments[-1]
        budget = int(min(cap, max(1, 3 * hops[last]))) if last in hops else cap
        if not net.open_successors(last) and last != dest:
            return [prefix]
        return mc_rollout(g_old, prefix, dest, n, budget, rng)

    if s_od:
        dis.append(float(np.mean([yaw_distance(c, s_od, net) for c in complete(1)])))
    for i in range(1, n_dec + 1):
        if i == n_dec:
            seq[i - 1] = d_seq(d, traj)
            if s_od:
                dis.append(yaw_distance(traj, s_od, net))
            continue
        comps = complete(i + 1)
        seq[i - 1] = float(np.mean(d.predict_proba(comps)))
        if s_od:
            dis.append(float(np.mean([yaw_distance(c, s_od, net) for c in comps])))
    yaw = normalize_yaw_changes(dis) if s_od else np.zeros(n_dec)
    return combined_reward(seq, yaw)
