"""Movement policy scoring candidates by ``f = g + h``.

``g`` is the observed cost of the traversed prefix (embedding, LSTM,
dot-product attention, then a softmax restricted to graph successors) and
``h`` is the expected cost to the destination (graph attention over road
context vectors, then an MLP with a sigmoid output).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numkernel as nk
from .exceptions import DeadEndError, InfeasibleCandidateError, MissingSegmentError, NumericError
from .roadnet import haversine_matrix
from .trajectory import N_TIME_SLOTS, Trajectory, encode_time


@dataclass
class ModelConfig:
    d_seg: int = 64
    d_time: int = 16
    hidden: int = 128
    d_s: int = 32
    z: int = 2
    mlp_hidden: int = 64
    use_h: bool = True
    utc_offset_hours: float = 0.0


@dataclass
class PolicyState:
    """LSTM state after consuming a prefix, plus every hidden state so far."""

    h: np.ndarray
    c: np.ndarray
    hs: tuple

    def enhanced(self):
        if len(self.hs) == 1:
            return self.hs[0]
        return nk.dot_attention(np.stack(self.hs))


@dataclass
class Decision:
    """One generation decision: at prefix position ``pos`` choose ``chosen`` among ``candidates``."""

    pos: int
    candidates: tuple
    chosen: int


@dataclass
class Episode:
    segments: tuple
    times: tuple
    dest: int
    decisions: list


class PolicyModel:
    """Parameters and forward passes of the g/h policy on a fixed network."""

    def __init__(self, net, config=None, seed=0, params=None):
        self.net = net
        self.config = config or ModelConfig()
        cfg = self.config
        self.ctx = np.asarray(net.context_matrix(), dtype=float)
        n = len(net)
        self.gat_edges = nk.neighbor_edges(
            n, [[net.row(p) for p in net.predecessors(s)] for s in net.ids])
        lat, lon = net.lats, net.lons
        corners = haversine_matrix([lat.min()], [lon.min()], [lat.max()], [lon.max()])[0, 0]
        self.dist_scale = float(max(corners, 1.0))
        self.d_rep = cfg.d_s if cfg.z > 0 else self.ctx.shape[1]
        if params is None:
            rng = np.random.default_rng(seed)
            params = nk.ParamStore()
            params.add("seg_emb", rng.normal(0, 0.1, (n, cfg.d_seg)))
            params.add("time_emb", rng.normal(0, 0.1, (N_TIME_SLOTS, cfg.d_time)))
            nk.lstm_params(params, "lstm", cfg.d_seg + cfg.d_time, cfg.hidden, rng)
            params.add("out.W", rng.normal(0, 0.1, (n, cfg.hidden)))
            d_in = self.ctx.shape[1]
            for k in range(cfg.z):
                nk.gat_params(params, f"gat.{k}", d_in, cfg.d_s, rng)
                d_in = cfg.d_s
            nk.mlp_params(params, "mlp", [2 * self.d_rep + 1, cfg.mlp_hidden, 1], rng)
        self.params = params
        self._rep_cache = None
        self._h_cache = {}

    # -- parameter groups --------------------------------------------------------
    def g_param_names(self):
        return [k for k in self.params.names() if k.split(".")[0] in ("seg_emb", "time_emb", "lstm", "out")]

    def h_param_names(self):
        return [k for k in self.params.names() if k.split(".")[0] in ("gat", "mlp")]

    def snapshot(self):
        """Independent copy sharing static structure but not parameters."""
        return PolicyModel(self.net, self.config, params=self.params.copy())

    def metadata(self):
        return {"kind": "policy", "network": self.net.digest(), "n_segments": len(self.net),
                "config": asdict(self.config)}

    def save(self, path):
        nk.save_params(self.params, path, self.metadata())

    @classmethod
    def load(cls, path, net):
        params, meta = nk.load_params(path)
        if meta.get("network") != net.digest():
            raise ValueError(f"checkpoint {path} was built for a different network")
        return cls(net, ModelConfig(**meta["config"]), params=params)

    # -- embeddings ------------------------------------------------------------------
    def slot(self, t):
        return encode_time(t, self.config.utc_offset_hours)

    def embed_point(self, segment, t):
        row = self._row(segment)
        return np.concatenate([
            nk.embedding_lookup(self.params["seg_emb"], row),
            nk.embedding_lookup(self.params["time_emb"], self.slot(t) - 1)])

    def _row(self, sid):
        try:
            return self.net.index[sid]
        except KeyError:
            raise MissingSegmentError(f"unknown segment id {sid}") from None

    # -- g: observed cost ------------------------------------------------------------------
    def begin(self, segments, times):
        H = self.config.hidden
        state = PolicyState(np.zeros(H), np.zeros(H), ())
        for s, t in zip(segments, times):
            state = self.advance(state, s, t)
        return state

    def advance(self, state, segment, t):
        h, c = nk.recurrent_cell_step(self.params, "lstm", self.embed_point(segment, t), (state.h, state.c))
        return PolicyState(h, c, state.hs + (h,))

    def observed_log_probs(self, state, candidates):
        """log P(c | prefix) over ``candidates`` (the unmasked support)."""
        rows = [self._row(c) for c in candidates]
        logits = self.params["out.W"][rows] @ state.enhanced()
        return nk.masked_log_softmax(logits, np.ones(len(rows), dtype=bool))

    def observed_distribution(self, prefix, net=None):
        """Mapping successor -> probability for the last segment of ``prefix``.

        Only open successors (under ``net``'s closures) carry mass.
        """
        net = net or self.net
        if len(prefix) == 0:
            raise ValueError("prefix must be non-empty")
        cands = net.open_successors(prefix.segments[-1])
        if not cands:
            raise DeadEndError(f"segment {prefix.segments[-1]} has no open successor")
        state = self.begin(prefix.segments, prefix.times)
        probs = np.exp(self.observed_log_probs(state, cands))
        return dict(zip(cands, probs))

    def full_observed_distribution(self, prefix, net=None):
        """Probability vector over every segment row; non-successors are exactly 0."""
        net = net or self.net
        cands = net.open_successors(prefix.segments[-1])
        if not cands:
            raise DeadEndError(f"segment {prefix.segments[-1]} has no open successor")
        state = self.begin(prefix.segments, prefix.times)
        logits = self.params["out.W"] @ state.enhanced()
        mask = np.zeros(len(self.net), dtype=bool)
        mask[[self._row(c) for c in cands]] = True
        return nk.masked_softmax(logits, mask)

    def observed_cost_g(self, prefix, candidate, net=None):
        dist = self.observed_distribution(prefix, net)
        if candidate not in dist:
            raise InfeasibleCandidateError(f"{candidate} is not an open successor of {prefix.segments[-1]}")
        p = dist[candidate]
        return -math.log(p) if p > 0 else math.inf

    # -- h: expected cost ---------------------------------------------------------------------
    def representations(self):
        """Road representations after ``z`` graph-attention updates (cached per parameter version)."""
        cache = self._rep_cache
        if cache is not None and cache[0] == self.params.version:
            return cache[1]
        N = self.ctx
        caches = []
        for k in range(self.config.z):
            N, cache_k = nk.gat_forward(self.params, f"gat.{k}", N, self.gat_edges)
            caches.append(cache_k)
        self._rep_cache = (self.params.version, N, caches)
        self._h_cache = {}
        return N

    def _rep_backward(self, dN):
        version, _N, caches = self._rep_cache
        for k in range(self.config.z - 1, -1, -1):
            dN = nk.gat_backward(self.params, f"gat.{k}", dN, caches[k])

    def _h_inputs(self, N, cand_rows, dest_rows):
        lat, lon = self.net.lats, self.net.lons
        d = _pair_haversine(lat[cand_rows], lon[cand_rows], lat[dest_rows], lon[dest_rows])
        return np.concatenate([N[cand_rows], N[dest_rows], (d / self.dist_scale)[..., None]], axis=-1)

    def _h_from_inputs(self, X):
        z, cache = nk.mlp_forward(self.params, "mlp", X, out_activation="linear")
        return np.logaddexp(0.0, -z[..., 0]), z[..., 0], cache

    def h_to_dest(self, dest):
        """Expected cost h for every segment towards ``dest`` (vector over rows)."""
        n = len(self.net)
        if not self.config.use_h:
            self._row(dest)
            return np.zeros(n)
        N = self.representations()
        key = dest
        hit = self._h_cache.get(key)
        if hit is not None:
            return hit
        drow = self._row(dest)
        X = self._h_inputs(N, np.arange(n), np.full(n, drow))
        h, _, _ = self._h_from_inputs(X)
        if len(self._h_cache) > 256:
            self._h_cache.clear()
        self._h_cache[key] = h
        return h

    def expected_probability(self, candidate, dest):
        return math.exp(-self.expected_cost_h(candidate, dest))

    def expected_cost_h(self, candidate, dest):
        return float(self.h_to_dest(dest)[self._row(candidate)])

    # -- f ----------------------------------------------------------------------------------
    def step_costs(self, state, candidates, dest):
        """Per-candidate ``f = g + h`` for a search step."""
        g = -self.observed_log_probs(state, candidates)
        h = self.h_to_dest(dest)[[self._row(c) for c in candidates]]
        return g + h

    def policy_log_probs(self, state, candidates, dest):
        """Sampling distribution ``softmax(-f)`` over ``candidates`` (log scale)."""
        f = self.step_costs(state, candidates, dest)
        return nk.masked_log_softmax(-f, np.ones(len(f), dtype=bool))

    def total_cost_f(self, prefix, candidate, dest, net=None):
        return self.observed_cost_g(prefix, candidate, net) + self.expected_cost_h(candidate, dest)


def _pair_haversine(lat1, lon1, lat2, lon2):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dl = np.radians(lon2 - lon1)
    s = np.sin((p2 - p1) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * 6_371_000.0 * np.arcsin(np.minimum(1.0, np.sqrt(s)))


def road_representations(model, net=None):
    return model.representations()


# -- batched training passes -------------------------------------------------------------------

def episodes_from_trajectories(trajs, net, dests=None):
    """Teacher-forcing episodes: every step's candidates are the open successors in ``net``.

    ``dests`` overrides the per-trajectory destination (generated samples
    that stopped short keep their intended target).
    """
    out = []
    for n, t in enumerate(trajs):
        decisions = []
        for i, (a, b) in enumerate(zip(t.segments, t.segments[1:])):
            cands = net.open_successors(a)
            if b not in cands:
                raise InfeasibleCandidateError(f"trajectory {t.tid}: {b} is not an open successor of {a}")
            decisions.append(Decision(i, cands, b))
        dest = t.destination if dests is None else dests[n]
        out.append(Episode(t.segments, t.times, dest, decisions))
    return out


def policy_batch(model, episodes, *, use_g=True, use_h=None, weights=None, backward=True):
    """Log-likelihood of chosen actions under ``softmax(use_g*log P_g - use_h*h)``.

    The loss is ``-sum_m w_m log pi(a_m) / M`` over all ``M`` decisions.
    With ``backward`` the gradient is accumulated into ``model.params.grads``.
    ``weights`` is a flat sequence aligned with decisions in episode order.
    Returns a dict with ``loss``, per-decision ``logp`` and ``correct`` (argmax hit).
    """
    if use_h is None:
        use_h = model.config.use_h
    params = model.params
    net = model.net
    idx = net.index
    episodes = [e for e in episodes if len(e.segments) >= 1]
    dec = [(b, d) for b, e in enumerate(episodes) for d in e.decisions]
    M = len(dec)
    if M == 0:
        return {"loss": 0.0, "logp": np.zeros(0), "correct": np.zeros(0, dtype=bool), "n": 0}
    w = np.ones(M) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (M,):
        raise ValueError(f"expected {M} weights, got {w.shape}")
    K = max(len(d.candidates) for _, d in dec)
    cand_rows = np.zeros((M, K), dtype=np.intp)
    mask = np.zeros((M, K), dtype=bool)
    chosen = np.zeros(M, dtype=np.intp)
    for m, (_, d) in enumerate(dec):
        rows = [idx[c] for c in d.candidates]
        cand_rows[m, :len(rows)] = rows
        mask[m, :len(rows)] = True
        chosen[m] = d.candidates.index(d.chosen)
    score = np.zeros((M, K))
    arangeM = np.arange(M)

    if use_g:
        B = len(episodes)
        T = max(len(e.segments) for e in episodes)
        seg_rows = np.zeros((B, T), dtype=np.intp)
        slots = np.zeros((B, T), dtype=np.intp)
        smask = np.zeros((B, T))
        for b, e in enumerate(episodes):
            n = len(e.segments)
            seg_rows[b, :n] = [idx[s] for s in e.segments]
            slots[b, :n] = [model.slot(t) - 1 for t in e.times]
            smask[b, :n] = 1.0
        X = np.concatenate([params["seg_emb"][seg_rows], params["time_emb"][slots]], axis=-1)
        Hs, lstm_cache = nk.lstm_forward(params, "lstm", X, smask)
        Ht, att_cache = nk.causal_attention_forward(Hs)
        bpos = np.array([b for b, _ in dec])
        ipos = np.array([d.pos for _, d in dec])
        hd = Ht[bpos, ipos]
        Wc = params["out.W"][cand_rows]
        logits = np.einsum("mkh,mh->mk", Wc, hd)
        logPg = nk.masked_log_softmax(logits, mask)
        Pg = np.where(mask, np.exp(logPg), 0.0)
        score = score + np.where(mask, logPg, 0.0)
    if use_h:
        N = model.representations()
        dest_rows = np.array([idx[episodes[b].dest] for b, _ in dec])
        Xh = model._h_inputs(N, cand_rows, np.broadcast_to(dest_rows[:, None], (M, K)))
        hval, zval, mlp_cache = model._h_from_inputs(Xh)
        score = score - np.where(mask, hval, 0.0)

    logpi = nk.masked_log_softmax(score, mask)
    lp = logpi[arangeM, chosen]
    if not np.all(np.isfinite(lp)):
        raise NumericError("non-finite log-probability in policy batch")
    loss = float(-(w * lp).sum() / M)
    masked_score = np.where(mask, score, -np.inf)
    correct = masked_score.argmax(axis=1) == chosen
    out = {"loss": loss, "logp": lp, "correct": correct, "n": M}
    if not backward:
        return out

    pi = np.where(mask, np.exp(logpi), 0.0)
    onehot = np.zeros((M, K))
    onehot[arangeM, chosen] = 1.0
    dscore = (pi - onehot) * (w / M)[:, None]
    if use_g:
        dlogits = nk.masked_log_softmax_backward(dscore, Pg, mask)
        gW = params.grads["out.W"]
        np.add.at(gW, cand_rows[mask], (dlogits[..., None] * hd[:, None, :])[mask])
        dhd = np.einsum("mk,mkh->mh", dlogits, Wc)
        dHt = np.zeros_like(Ht)
        np.add.at(dHt, (bpos, ipos), dhd)
        dHs = nk.causal_attention_backward(dHt, att_cache)
        dX = nk.lstm_backward(params, "lstm", dHs, lstm_cache)
        d_seg = dX[..., :model.config.d_seg]
        d_time = dX[..., model.config.d_seg:]
        valid = smask.astype(bool)
        np.add.at(params.grads["seg_emb"], seg_rows[valid], d_seg[valid])
        np.add.at(params.grads["time_emb"], slots[valid], d_time[valid])
    if use_h:
        # h = softplus(-z); dh/dz = -sigmoid(-z); score carries -h
        dz = np.where(mask, dscore * nk.sigmoid(-zval), 0.0)[..., None]
        dXh = nk.mlp_backward(params, "mlp", dz, mlp_cache, d_preact=True)
        d = model.d_rep
        dN = np.zeros_like(N)
        np.add.at(dN, cand_rows[mask], dXh[..., :d][mask])
        np.add.at(dN, dest_rows, dXh[..., d:2 * d].sum(axis=1))
        if model.config.z > 0:
            model._rep_backward(dN)
    return out


def trajectory_log_prob(model, traj, net=None, dest=None):
    """Recompute per-step ``log softmax(-f)`` of ``traj`` one step at a time."""
    net = net or model.net
    dest = traj.destination if dest is None else dest
    state = model.begin(traj.segments[:1], traj.times[:1])
    out = []
    for i in range(1, len(traj)):
        cands = net.open_successors(traj.segments[i - 1])
        lp = model.policy_log_probs(state, cands, dest)
        out.append(float(lp[cands.index(traj.segments[i])]))
        state = model.advance(state, traj.segments[i], traj.times[i])
    return out


__all__ = [
    "ModelConfig", "PolicyModel", "PolicyState", "Decision", "Episode", "Trajectory",
    "encode_time", "episodes_from_trajectories", "policy_batch", "road_representations",
    "trajectory_log_prob",
]
