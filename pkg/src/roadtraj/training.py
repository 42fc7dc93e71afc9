"""Pretraining of g, h and the discriminator; adversarial REINFORCE fine-tuning."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numkernel as nk
from .discriminator import RealODIndex, trajectory_rewards
from .exceptions import (
    DiscontinuousTrajectoryError, EmptyCorpusError, GenerationStarvationError,
    InvalidArgumentError, NumericError,
)
from .generator import episodes_from_trajectories, policy_batch
from .searchgen import build_od_matrix, sample_od, stochastic_generate
from .trajectory import is_continuous

log = logging.getLogger(__name__)

# fixed stream ids so that every stage draws from its own reproducible RNG
STAGES = {"pretrain_g": 0, "pretrain_h": 1, "pretrain_d": 2, "adversarial": 3,
          "region_g": 4, "region_h": 5, "generate": 6, "evaluate": 7}


def stage_rng(seed, stage, *extra):
    return np.random.default_rng([int(seed), STAGES[stage], *map(int, extra)])


@dataclass
class TrainConfig:
    """Training knobs. ``lr`` drives the REINFORCE update; pretraining uses Adam at ``pretrain_lr``."""

    lr: float = 0.01
    pretrain_lr: float = 0.01
    batch_size: int = 64
    rollouts: int = 8
    epochs_g: int = 8
    epochs_h: int = 4
    epochs_d: int = 3
    adv_rounds: int = 5
    adv_batch: int = 16
    d_steps: int = 1
    seed: int = 0
    use_yaw: bool = True
    use_h: bool = True
    baseline: bool = False
    rollout_cap: int = 200
    max_seconds: float = 0.0

    def __post_init__(self):
        if not self.lr > 0 or not self.pretrain_lr > 0:
            raise InvalidArgumentError("learning rates must be > 0")
        if self.rollouts < 1:
            raise InvalidArgumentError("rollout count must be >= 1")
        if self.batch_size < 1 or self.adv_batch < 1:
            raise InvalidArgumentError("batch sizes must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in known:
                continue
            default = getattr(cls, k)
            if isinstance(default, bool):
                out[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
            else:
                out[k] = type(default)(v)
        return cls(**out)


LOG_COLUMNS = ("stage", "step", "g_loss", "h_loss", "d_loss", "mean_reward", "reach_rate",
               "accuracy", "note")


class TrainLog:
    """Append-only table of per-epoch / per-round scalars (wall time kept separately)."""

    def __init__(self):
        self.rows = []
        self.timings = []

    def append(self, stage, step, seconds=None, **vals):
        row = {c: "" for c in LOG_COLUMNS}
        row["stage"], row["step"] = stage, step
        for k, v in vals.items():
            if k not in LOG_COLUMNS:
                raise KeyError(f"unknown log column {k}")
            row[k] = v
        self.rows.append(row)
        if seconds is not None:
            self.timings.append((stage, step, seconds))
        return row

    def column(self, stage, name):
        return [r[name] for r in self.rows if r["stage"] == stage]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([_cell(r[c]) for c in LOG_COLUMNS])
        return buf.getvalue()

    def timings_csv(self):
        return "stage,step,seconds\n" + "".join(f"{s},{i},{t:.3f}\n" for s, i, t in self.timings)


def _cell(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def check_corpus(corpus, net, min_length=2):
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpusError("training corpus is empty")
    bad = [t.tid for t in corpus if len(t) < min_length or not is_continuous(t, net)]
    if bad:
        raise DiscontinuousTrajectoryError(
            f"{len(bad)} trajectories are discontinuous or shorter than {min_length}: ids {bad[:10]}")
    return corpus


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _fit_policy(model, train, valid, cfg, log_, stage, *, use_g, use_h, names, epochs):
    net = model.net
    episodes = episodes_from_trajectories(check_corpus(train, net), net)
    val_eps = episodes_from_trajectories(check_corpus(valid, net), net) if valid else []
    opt = nk.Adam(model.params, lr=cfg.pretrain_lr)
    rng = stage_rng(cfg.seed, stage)
    t0 = time.perf_counter()
    acc = float("nan")
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(len(episodes), cfg.batch_size, rng):
            model.params.zero_grad()
            out = policy_batch(model, [episodes[i] for i in idx], use_g=use_g, use_h=use_h)
            if out["n"] == 0:
                continue
            opt.step(names)
            total += out["loss"] * out["n"]
            count += out["n"]
        acc = policy_accuracy(model, val_eps, use_g=use_g, use_h=use_h) if val_eps else float("nan")
        loss = total / max(count, 1)
        key = "g_loss" if stage.endswith("_g") else "h_loss"
        log_.append(stage, epoch, seconds=time.perf_counter() - t0, accuracy=acc, **{key: loss})
        log.info("%s epoch %d loss %.4f acc %.4f", stage, epoch, loss, acc)
        if cfg.max_seconds and time.perf_counter() - t0 > cfg.max_seconds:
            break
    model.params.zero_grad()
    return acc


def policy_accuracy(model, episodes, *, use_g=True, use_h=False, chunk=256):
    """Share of multi-candidate decisions whose argmax equals the true next segment.

    Forced moves are always right, so a corpus made only of them scores 1.0.
    """
    hits, total, forced = 0, 0, 0
    for i in range(0, len(episodes), chunk):
        part = episodes[i:i + chunk]
        out = policy_batch(model, part, use_g=use_g, use_h=use_h, backward=False)
        if out["n"] == 0:
            continue
        multi = np.array([len(dc.candidates) > 1 for e in part for dc in e.decisions])
        hits += int(out["correct"][multi].sum())
        total += int(multi.sum())
        forced += int((~multi).sum())
    if total:
        return hits / total
    return 1.0 if forced else float("nan")


def pretrain_g(model, train, valid=(), cfg=None, log_=None):
    """Next-segment prediction under the topological mask; returns held-out top-1 accuracy."""
    cfg = cfg or TrainConfig()
    log_ = log_ if log_ is not None else TrainLog()
    acc = _fit_policy(model, train, valid, cfg, log_, "pretrain_g", use_g=True, use_h=False,
                      names=model.g_param_names(), epochs=cfg.epochs_g)
    return acc, log_


def pretrain_h(model, train, valid=(), cfg=None, log_=None):
    """Destination-conditioned sibling discrimination with ``softmax(-h)`` over successors."""
    cfg = cfg or TrainConfig()
    log_ = log_ if log_ is not None else TrainLog()
    if not model.config.use_h:
        log_.append("pretrain_h", 0, note="h disabled")
        return float("nan"), log_
    acc = _fit_policy(model, train, valid, cfg, log_, "pretrain_h", use_g=False, use_h=True,
                      names=model.h_param_names(), epochs=cfg.epochs_h)
    return acc, log_


def generated_batch(model, od, n, rng, net=None, max_steps_factor=3, cap=200):
    """``n`` samples from the stochastic engine on ODs drawn from ``od``."""
    net = net or model.net
    out = []
    for _ in range(n):
        l_s, l_d, t_s = sample_od(od, rng)
        hops = net.hop_distances_to(l_d).get(l_s)
        steps = min(cap, max(1, max_steps_factor * hops)) if hops else cap
        out.append(stochastic_generate(model, net, l_s, l_d, t_s, steps, rng))
    return out


def _d_epoch(d, real, fake, cfg, opt, rng, labels_flipped=False):
    data = list(real) + list(fake)
    y = np.concatenate([np.ones(len(real)), np.zeros(len(fake))])
    if labels_flipped:
        y = 1.0 - y
    total = 0.0
    for idx in _batches(len(data), cfg.batch_size, rng):
        d.params.zero_grad()
        total += d.bce_step([data[i] for i in idx], y[idx]) * len(idx)
        opt.step()
    d.params.zero_grad()
    return total / len(data)


def separation(d, real, fake):
    """Mean score on real minus mean score on generated trajectories."""
    return float(np.mean(d.predict_proba(real)) - np.mean(d.predict_proba(fake)))


def pretrain_d(d, model, train, valid=(), cfg=None, log_=None, labels_flipped=False):
    """Binary cross-entropy, real vs stochastic samples; returns held-out separation."""
    cfg = cfg or TrainConfig()
    log_ = log_ if log_ is not None else TrainLog()
    train = check_corpus(train, model.net)
    rng = stage_rng(cfg.seed, "pretrain_d")
    od = build_od_matrix(train)
    fake = generated_batch(model, od, len(train), rng)
    opt = nk.Adam(d.params, lr=cfg.pretrain_lr)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs_d):
        loss = _d_epoch(d, train, fake, cfg, opt, rng, labels_flipped)
        log_.append("pretrain_d", epoch, seconds=time.perf_counter() - t0, d_loss=loss)
    sep = float("nan")
    if valid:
        valid = list(valid)
        vfake = generated_batch(model, build_od_matrix(valid), len(valid), rng)
        sep = separation(d, valid, vfake)
        log_.append("pretrain_d", cfg.epochs_d, note=f"separation={sep:.6f}")
    return sep, log_


def reinforce_step(model, trajectories, rewards, lr, *, dests=None, names=None, baseline=False,
                   net=None):
    """One REINFORCE update: ``theta += lr * mean_m R_m grad log pi(a_m)``.

    ``rewards`` is a list of per-decision reward arrays (or :class:`RewardBundle`).
    Returns the applied update as ``{name: delta}``. A non-finite gradient
    leaves the parameters untouched and raises :class:`NumericError`.
    """
    net = net or model.net
    episodes = episodes_from_trajectories(trajectories, net, dests)
    w = np.concatenate([np.asarray(getattr(r, "total", r), dtype=float) for r in rewards]) \
        if rewards else np.zeros(0)
    if w.size != sum(len(e.decisions) for e in episodes):
        raise ValueError("rewards do not align with trajectory decisions")
    if baseline and w.size:
        w = w - w.mean()
    names = names or (model.g_param_names() + (model.h_param_names() if model.config.use_h else []))
    model.params.zero_grad()
    with np.errstate(invalid="ignore", over="ignore"):
        policy_batch(model, episodes, use_g=True, weights=w)
    if not all(np.all(np.isfinite(model.params.grads[k])) for k in names):
        model.params.zero_grad()
        raise NumericError("non-finite policy gradient; update skipped")
    update = {k: -lr * model.params.grads[k] for k in names}
    for k in names:
        model.params.params[k] += update[k]
    model.params.touch()
    model.params.zero_grad()
    return update


def adversarial_loop(model, d, train, cfg=None, log_=None, *, checkpoint=None, real_index=None,
                     start_round=0):
    """Alternate REINFORCE on the generator with discriminator updates for ``cfg.adv_rounds``.

    Per round: snapshot the lagged generator, sample a batch with the
    stochastic engine, score every decision (rollout rewards plus mobility
    yaw), update the generator, then fit ``d`` on fresh real and generated
    batches. ``checkpoint(round, model, d)`` is called after every round.
    Rounds are numbered from ``start_round`` so a resumed run replays the
    same random streams; the discriminator optimizer restarts each round.
    """
    cfg = cfg or TrainConfig()
    log_ = log_ if log_ is not None else TrainLog()
    train = check_corpus(train, model.net)
    od = build_od_matrix(train)
    real_index = real_index or RealODIndex(train, model.net)
    t0 = time.perf_counter()
    for rnd in range(start_round, start_round + cfg.adv_rounds):
        rng = stage_rng(cfg.seed, "adversarial", rnd)
        d_opt = nk.Adam(d.params, lr=cfg.pretrain_lr)
        g_old = model.snapshot()
        batch = generated_batch(model, od, cfg.adv_batch, rng)
        if all(len(t) < 2 for t in batch):
            raise GenerationStarvationError(f"round {rnd}: no generated trajectory made a move")
        batch = [t for t in batch if len(t) >= 2]
        dests = [t.info["target"] for t in batch]
        bundles = [trajectory_rewards(d, g_old, t, real_index, cfg.rollouts, rng, use_yaw=cfg.use_yaw,
                                      dest=dst, cap=cfg.rollout_cap) for t, dst in zip(batch, dests)]
        reward = float(np.mean(np.concatenate([b.total for b in bundles])))
        reach = float(np.mean([not t.info["partial"] for t in batch]))
        note = ""
        try:
            reinforce_step(model, batch, bundles, cfg.lr, dests=dests, baseline=cfg.baseline)
        except NumericError as exc:
            log.warning("round %d: %s", rnd, exc)
            note = "skipped: non-finite gradient"
        g_loss = policy_batch(model, episodes_from_trajectories(batch, model.net, dests),
                              backward=False)["loss"]
        d_loss = 0.0
        for _ in range(cfg.d_steps):
            real = [train[i] for i in rng.choice(len(train), size=min(len(train), cfg.adv_batch),
                                                 replace=False)]
            fake = generated_batch(model, od, cfg.adv_batch, rng)
            d_loss = _d_epoch(d, real, fake, cfg, d_opt, rng)
        log_.append("adversarial", rnd, seconds=time.perf_counter() - t0, g_loss=g_loss,
                    d_loss=d_loss, mean_reward=reward, reach_rate=reach, note=note)
        if checkpoint is not None:
            checkpoint(rnd, model, d)
    return log_


def config_dict(cfg):
    return asdict(cfg)
