"""scikit-learn style wrappers around partitioning and the full generation pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .discriminator import SeqDiscriminator
from .exceptions import RoadTrajError
from .generator import ModelConfig, PolicyModel, trajectory_log_prob
from .regions import boundary_sets, mapping_matrix, map_traj_to_regions, partition_network, region_network
from .searchgen import build_od_matrix, generate_many, run_engine, region_corpus, task_rng
from .training import TrainConfig, TrainLog, adversarial_loop, pretrain_d, pretrain_g, pretrain_h
from .trajectory import split_corpus
from .validation import check_network, check_od_tasks, check_scalar, check_trajectories


class RegionPartitioner(TransformerMixin, BaseEstimator):
    """Balanced min-cut partition of a road network; ``transform`` maps trajectories to regions."""

    def __init__(self, k=8, epsilon=0.03, seed=0):
        self.k = k
        self.epsilon = epsilon
        self.seed = seed

    def fit(self, X, y=None, corpus=None):
        net = check_network(X)
        check_scalar(self.k, "k", target_type=int, min_val=2)
        check_scalar(self.epsilon, "epsilon", min_val=0.0, max_val=1.0, include_max=False)
        self.partition_ = partition_network(net, self.k, self.epsilon, seed=self.seed)
        self.labels_ = np.array([self.partition_.assignment[s] for s in net.ids])
        self.mapping_ = mapping_matrix(self.partition_, net)
        self.boundaries_ = boundary_sets(net, self.partition_,
                                         check_trajectories(corpus, net, allow_empty=True) if corpus else ())
        self.cut_ = self.partition_.cut
        self.network_ = net
        return self

    def transform(self, X):
        check_is_fitted(self, "partition_")
        return [map_traj_to_regions(self.partition_, t) for t in check_trajectories(X, self.network_)]

    def region_network(self):
        check_is_fitted(self, "partition_")
        return region_network(self.network_, self.partition_, self.boundaries_)


class TrajectoryGenerator(BaseEstimator):
    """End-to-end generator: pretraining, optional adversarial rounds, then search-based generation.

    ``fit(X)`` takes real trajectories on ``network``; ``predict(X)`` takes
    ``(origin, destination, start_time)`` tasks and returns one trajectory
    per task; ``sample(n)`` draws tasks from the fitted OD matrix.
    """

    def __init__(self, network=None, mode="two-stage", k=None, epsilon=0.03, d_seg=32, d_time=8,
                 hidden=64, d_s=16, z=2, mlp_hidden=32, use_h=True, epochs_g=6, epochs_h=4, epochs_d=2,
                 adv_rounds=0, lr=0.01, pretrain_lr=0.01, batch_size=64, rollouts=8, budget=10_000,
                 retries=3, seed=0):
        self.network = network
        self.mode = mode
        self.k = k
        self.epsilon = epsilon
        self.d_seg = d_seg
        self.d_time = d_time
        self.hidden = hidden
        self.d_s = d_s
        self.z = z
        self.mlp_hidden = mlp_hidden
        self.use_h = use_h
        self.epochs_g = epochs_g
        self.epochs_h = epochs_h
        self.epochs_d = epochs_d
        self.adv_rounds = adv_rounds
        self.lr = lr
        self.pretrain_lr = pretrain_lr
        self.batch_size = batch_size
        self.rollouts = rollouts
        self.budget = budget
        self.retries = retries
        self.seed = seed

    def _configs(self):
        mcfg = ModelConfig(d_seg=self.d_seg, d_time=self.d_time, hidden=self.hidden, d_s=self.d_s,
                           z=self.z, mlp_hidden=self.mlp_hidden, use_h=self.use_h)
        tcfg = TrainConfig(lr=self.lr, pretrain_lr=self.pretrain_lr, batch_size=self.batch_size,
                           rollouts=self.rollouts, epochs_g=self.epochs_g, epochs_h=self.epochs_h,
                           epochs_d=self.epochs_d, adv_rounds=self.adv_rounds, seed=self.seed,
                           use_h=self.use_h)
        return mcfg, tcfg

    def fit(self, X, y=None):
        net = check_network(self.network)
        if self.mode not in ("two-stage", "astar", "stochastic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        corpus = check_trajectories(X, net, continuous=True, min_length=2)
        mcfg, tcfg = self._configs()
        train, valid, _ = split_corpus(corpus, self.seed, (0.8, 0.2, 0.0))
        self.log_ = TrainLog()
        self.road_model_ = PolicyModel(net, mcfg, seed=self.seed)
        self.g_accuracy_, _ = pretrain_g(self.road_model_, train, valid, tcfg, self.log_)
        pretrain_h(self.road_model_, train, valid, tcfg, self.log_)
        k = self.k or max(2, round(len(net) / 200))
        self.partitioner_ = RegionPartitioner(k, self.epsilon, self.seed).fit(net, corpus=train)
        rnet = self.partitioner_.region_network()
        self.region_model_ = PolicyModel(rnet, mcfg, seed=self.seed + 1)
        rtrain = region_corpus(train, self.partitioner_.partition_)
        if rtrain:
            pretrain_g(self.region_model_, rtrain, (), tcfg)
            pretrain_h(self.region_model_, rtrain, (), tcfg)
        self.discriminator_ = SeqDiscriminator(net, mcfg, seed=self.seed + 2)
        if self.adv_rounds:
            pretrain_d(self.discriminator_, self.road_model_, train, valid, tcfg, self.log_)
            adversarial_loop(self.road_model_, self.discriminator_, train, tcfg, self.log_)
        self.od_matrix_ = build_od_matrix(corpus)
        self.n_features_in_ = 1
        return self

    def _engine_kw(self):
        p = self.partitioner_
        return dict(road_model=self.road_model_, net=self.network, region_model=self.region_model_,
                    partition=p.partition_, boundaries=p.boundaries_, budget=self.budget)

    def predict(self, X):
        """One trajectory per ``(origin, destination, start_time)`` task (``None`` on failure)."""
        check_is_fitted(self, "road_model_")
        out = []
        for i, task in enumerate(check_od_tasks(X, self.network)):
            try:
                out.append(run_engine(self.mode, task, task_rng(self.seed, i), **self._engine_kw()))
            except RoadTrajError:
                out.append(None)
        return out

    def sample(self, n, seed=None):
        check_is_fitted(self, "road_model_")
        trajs, _ = generate_many(self.mode, self.od_matrix_, n, self.seed if seed is None else seed,
                                 retries=self.retries, **self._engine_kw())
        return trajs

    def score(self, X, y=None):
        """Mean per-decision log-likelihood of ``X`` under the road-level policy."""
        check_is_fitted(self, "road_model_")
        lp = [v for t in check_trajectories(X, self.network, continuous=True)
              for v in trajectory_log_prob(self.road_model_, t)]
        return float(np.mean(lp)) if lp else 0.0
