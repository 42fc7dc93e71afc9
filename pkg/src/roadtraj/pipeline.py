"""Run configuration, resumable staged pipeline and artifact loading."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

from .discriminator import SeqDiscriminator
from .exceptions import InvalidArgumentError, RoadTrajError
from .generator import ModelConfig, PolicyModel
from .metrics import evaluate
from .regions import (
    boundary_sets, dumps_boundaries, dumps_partition, parse_boundaries, parse_partition,
    partition_network, region_network,
)
from .roadnet import apply_closures, load_network
from .searchgen import build_od_matrix, generate_many, load_scenario, region_corpus
from .training import (
    TrainConfig, TrainLog, adversarial_loop, pretrain_d, pretrain_g, pretrain_h, stage_rng,
)
from .trajectory import (
    check_trajectory_segments, load_trajectories, preprocess_corpus, save_trajectories, split_corpus,
)

log = logging.getLogger(__name__)

STAGE_ORDER = ("split", "partition", "pretrain_g", "pretrain_h", "region_g", "region_h",
               "pretrain_d", "adversarial")

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


class ConfigError(RoadTrajError, ValueError):
    pass


class StageError(RoadTrajError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    """Flat run configuration; every key may appear in a ``key=value`` file or as a flag."""

    network: str = ""
    corpus: str = ""
    workdir: str = "run"
    seed: int = 0
    min_length: int = 5
    k: int = 0
    epsilon: float = 0.03
    budget: int = 10_000
    count: int = 100
    mode: str = "two-stage"
    retries: int = 3
    od_source: str = "test"
    micro_sample_size: int = 5000
    scenario: str = ""
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def model_config(self):
        return ModelConfig(**{k: _coerce(getattr(ModelConfig, k), v) for k, v in self.model.items()})

    def train_config(self):
        return TrainConfig.from_dict({**self.train, "seed": self.seed})

    def block_count(self, n_segments):
        return self.k if self.k >= 2 else max(2, round(n_segments / 200))

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("model", "train")}
        d.update({k: v for k, v in self.model.items()})
        d.update({k: v for k, v in self.train.items()})
        return d

    def training_hash(self):
        keys = {k: v for k, v in self.to_dict().items()
                if k not in ("count", "mode", "retries", "od_source", "micro_sample_size", "scenario",
                             "workdir", "budget")}
        return hashlib.sha256(json.dumps(keys, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def validate(self):
        if self.mode not in ("two-stage", "astar", "stochastic"):
            raise ConfigError(f"mode must be two-stage, astar or stochastic, not {self.mode!r}")
        if self.od_source not in ("train", "valid", "test"):
            raise ConfigError("od_source must be train, valid or test")
        if not 0 <= self.epsilon < 1:
            raise ConfigError("epsilon must lie in [0, 1)")
        for name in ("budget", "count", "micro_sample_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")
        try:
            self.model_config()
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _coerce(default, value):
    if isinstance(default, bool):
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
    return type(default)(value)


_TOP = {f.name: f.default for f in fields(RunConfig) if f.name not in ("model", "train")}


def parse_config(text):
    """Flat ``key=value`` lines; ``#`` starts a comment. Unknown keys are an error."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        k, v = (x.strip() for x in line.split("=", 1))
        raw[k] = v
    return raw


def build_config(raw):
    cfg = RunConfig()
    for k, v in raw.items():
        if v is None:
            continue
        if k in _TOP:
            setattr(cfg, k, _coerce(_TOP[k], v))
        elif k in MODEL_KEYS:
            cfg.model[k] = v
        elif k in TRAIN_KEYS:
            cfg.train[k] = v
        else:
            raise ConfigError(f"unknown config key {k!r}")
    return cfg.validate()


def load_config(path, overrides=None):
    raw = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            raw = parse_config(fh.read())
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(raw)


# -- artifacts ---------------------------------------------------------------------------

class Workdir:
    def __init__(self, root):
        self.root = root
        os.makedirs(os.path.join(root, "checkpoints"), exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def marker(self, stage):
        return self.path("checkpoints", f"{stage}.done")

    def done(self, stage):
        return os.path.exists(self.marker(stage))

    def mark(self, stage, info):
        _write(self.marker(stage), json.dumps(info, sort_keys=True) + "\n")

    def read_marker(self, stage):
        with open(self.marker(stage), encoding="utf-8") as fh:
            return json.load(fh)


def _write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _save_model(model, path):
    tmp = path + ".tmp.npz"
    model.save(tmp)
    os.replace(tmp, path)


@dataclass
class Artifacts:
    net: object
    train: list
    valid: list
    test: list
    partition: object
    boundaries: dict
    region_net: object
    road_model: object
    region_model: object
    disc: object = None


def _stage_hash(cfg, stage):
    return {"stage": stage, "config": cfg.training_hash()}


def run_pipeline(cfg, restart=False, stop_after=None):
    """Execute all stages, skipping those whose checkpoint marker matches this config."""
    wd = Workdir(cfg.workdir)
    if restart:
        for name in os.listdir(wd.path("checkpoints")):
            os.remove(wd.path("checkpoints", name))
        for name in ("trainlog.csv", "timings.csv"):
            if os.path.exists(wd.path(name)):
                os.remove(wd.path(name))
    for stage in STAGE_ORDER:
        if wd.done(stage):
            if wd.read_marker(stage).get("config") != cfg.training_hash():
                raise ConfigError(f"workdir {cfg.workdir} holds stage {stage} from a different config; "
                                  "use --restart")
    net = load_network(cfg.network)
    mcfg = cfg.model_config()
    tcfg = cfg.train_config()
    tlog = TrainLog()
    log_path = wd.path("trainlog.csv")
    if os.path.exists(log_path):
        tlog = _load_log(log_path)
    ran = []
    for stage in STAGE_ORDER:
        if wd.done(stage):
            continue
        try:
            _run_stage(stage, cfg, wd, net, mcfg, tcfg, tlog)
        except RoadTrajError as exc:
            raise StageError(stage, exc) from exc
        except (ValueError, KeyError, OSError) as exc:
            raise StageError(stage, exc) from exc
        _write(log_path, tlog.to_csv())
        _write(wd.path("timings.csv"), tlog.timings_csv())
        wd.mark(stage, _stage_hash(cfg, stage))
        ran.append(stage)
        if stop_after == stage:
            break
    return ran


def _load_log(path):
    import csv
    out = TrainLog()
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.rows.append(dict(row))
    return out


def _splits(wd):
    return [load_trajectories(wd.path(f"{name}.txt")) for name in ("train", "valid", "test")]


def _run_stage(stage, cfg, wd, net, mcfg, tcfg, tlog):
    log.info("running stage %s", stage)
    ck = lambda name: wd.path("checkpoints", name)  # noqa: E731
    if stage == "split":
        corpus = load_trajectories(cfg.corpus)
        check_trajectory_segments(corpus, net)
        corpus = preprocess_corpus(corpus, cfg.min_length)
        if len(corpus) < 5:
            raise InvalidArgumentError(f"only {len(corpus)} trajectories survive preprocessing")
        for name, part in zip(("train", "valid", "test"), split_corpus(corpus, cfg.seed)):
            save_trajectories(part, wd.path(f"{name}.txt"))
        return
    train, valid, _ = _splits(wd)
    if stage == "partition":
        p = partition_network(net, cfg.block_count(len(net)), cfg.epsilon, seed=cfg.seed)
        _write(wd.path("partition.txt"), dumps_partition(p, net))
        _write(wd.path("boundaries.txt"), dumps_boundaries(boundary_sets(net, p, train)))
        return
    if stage == "pretrain_g":
        model = PolicyModel(net, mcfg, seed=int(stage_rng(cfg.seed, "pretrain_g").integers(2**31)))
        pretrain_g(model, train, valid, tcfg, tlog)
        _save_model(model, ck("road_g.npz"))
        return
    if stage == "pretrain_h":
        model = PolicyModel.load(ck("road_g.npz"), net)
        pretrain_h(model, train, valid, tcfg, tlog)
        _save_model(model, ck("road_pre.npz"))
        return
    if stage in ("region_g", "region_h"):
        p, bounds = _load_regions(wd, cfg)
        rnet = region_network(net, p, bounds)
        rtrain, rvalid = region_corpus(train, p), region_corpus(valid, p)
        name = "region_g.npz" if stage == "region_g" else "region.npz"
        if stage == "region_g":
            model = PolicyModel(rnet, mcfg, seed=int(stage_rng(cfg.seed, "region_g").integers(2**31)))
            if rtrain:
                pretrain_g(model, rtrain, rvalid, tcfg, _RelabelLog(tlog, "pretrain_g", "region_g"))
        else:
            model = PolicyModel.load(ck("region_g.npz"), rnet)
            if rtrain:
                pretrain_h(model, rtrain, rvalid, tcfg, _RelabelLog(tlog, "pretrain_h", "region_h"))
        _save_model(model, ck(name))
        return
    if stage == "pretrain_d":
        model = PolicyModel.load(ck("road_pre.npz"), net)
        d = SeqDiscriminator(net, mcfg, seed=int(stage_rng(cfg.seed, "pretrain_d").integers(2**31)))
        pretrain_d(d, model, train, valid, tcfg, tlog)
        _save_model(d, ck("disc_pre.npz"))
        return
    if stage == "adversarial":
        model = PolicyModel.load(ck("road_pre.npz"), net)
        d = SeqDiscriminator.load(ck("disc_pre.npz"), net)
        start = 0
        for r in range(tcfg.adv_rounds - 1, -1, -1):
            if os.path.exists(ck(f"road_adv{r}.npz")) and os.path.exists(ck(f"disc_adv{r}.npz")):
                model = PolicyModel.load(ck(f"road_adv{r}.npz"), net)
                d = SeqDiscriminator.load(ck(f"disc_adv{r}.npz"), net)
                start = r + 1
                break

        def checkpoint(rnd, m, dd):
            _save_model(m, ck(f"road_adv{rnd}.npz"))
            _save_model(dd, ck(f"disc_adv{rnd}.npz"))
            _write(wd.path("trainlog.csv"), tlog.to_csv())

        remaining = TrainConfig.from_dict({**asdict(tcfg), "adv_rounds": max(0, tcfg.adv_rounds - start)})
        if remaining.adv_rounds:
            adversarial_loop(model, d, train, remaining, tlog, checkpoint=checkpoint, start_round=start)
        _save_model(model, ck("road.npz"))
        _save_model(d, ck("disc.npz"))
        return
    raise InvalidArgumentError(f"unknown stage {stage}")


class _RelabelLog:
    """Log proxy recording a pretraining stage under another stage name."""

    def __init__(self, inner, old, new):
        self.inner, self.old, self.new = inner, old, new

    def append(self, stage, step, seconds=None, **vals):
        return self.inner.append(self.new if stage == self.old else stage, step, seconds=seconds, **vals)


def _load_regions(wd, cfg):
    with open(wd.path("partition.txt"), encoding="utf-8") as fh:
        p = parse_partition(fh.read(), cfg.epsilon)
    with open(wd.path("boundaries.txt"), encoding="utf-8") as fh:
        bounds = parse_boundaries(fh.read())
    return p, bounds


def load_artifacts(cfg):
    wd = Workdir(cfg.workdir)
    missing = [s for s in STAGE_ORDER if not wd.done(s)]
    if missing:
        raise ConfigError(f"pipeline incomplete in {cfg.workdir}: missing stages {missing}")
    net = load_network(cfg.network)
    train, valid, test = _splits(wd)
    p, bounds = _load_regions(wd, cfg)
    rnet = region_network(net, p, bounds)
    ck = lambda name: wd.path("checkpoints", name)  # noqa: E731
    return Artifacts(net, train, valid, test, p, bounds, rnet,
                     PolicyModel.load(ck("road.npz"), net), PolicyModel.load(ck("region.npz"), rnet),
                     SeqDiscriminator.load(ck("disc.npz"), net))


def generate(cfg, art, count=None, mode=None, checkpoint=None):
    """Generate trajectories with the configured engine; returns ``(trajectories, failures)``."""
    count = cfg.count if count is None else count
    mode = mode or cfg.mode
    net = art.net
    road_model = art.road_model if checkpoint is None else PolicyModel.load(checkpoint, net)
    if cfg.scenario:
        net = apply_closures(net, load_scenario(cfg.scenario).closed)
    source = {"train": art.train, "valid": art.valid, "test": art.test}[cfg.od_source]
    od = build_od_matrix(source)
    seed = int(stage_rng(cfg.seed, "generate").integers(2**31))
    return generate_many(mode, od, count, seed, retries=cfg.retries, road_model=road_model, net=net,
                         region_model=art.region_model, partition=art.partition,
                         boundaries=art.boundaries, budget=cfg.budget)


def evaluate_against(cfg, art, generated, real=None):
    real = art.test if real is None else real
    return evaluate(real, generated, art.net, cfg.micro_sample_size,
                    seed=int(stage_rng(cfg.seed, "evaluate").integers(2**31)))
