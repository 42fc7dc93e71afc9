"""Road-network trajectory generation: A*-style search over learned costs, two-stage generation."""

from .discriminator import SeqDiscriminator, mc_rollout, trajectory_rewards
from .estimators import RegionPartitioner, TrajectoryGenerator
from .exceptions import RoadTrajError
from .generator import ModelConfig, PolicyModel
from .metrics import EvalReport, evaluate, jsd
from .regions import Partition, boundary_sets, mapping_matrix, partition_network, region_network
from .roadnet import RoadNetwork, RoadSegment, apply_closures, load_network, save_network, synth_grid
from .searchgen import (
    ODMatrix, UniformPolicy, astar_generate, build_od_matrix, sample_od, stochastic_generate,
    two_stage_generate,
)
from .training import TrainConfig, TrainLog, adversarial_loop, pretrain_d, pretrain_g, pretrain_h
from .trajectory import Trajectory, load_trajectories, save_trajectories

__version__ = "0.1.0"

__all__ = [
    "EvalReport", "ModelConfig", "ODMatrix", "Partition", "PolicyModel", "RegionPartitioner",
    "RoadNetwork", "RoadSegment", "RoadTrajError", "SeqDiscriminator", "TrainConfig", "TrainLog",
    "Trajectory", "TrajectoryGenerator", "UniformPolicy", "adversarial_loop", "apply_closures",
    "astar_generate", "boundary_sets", "build_od_matrix", "evaluate", "jsd", "load_network",
    "load_trajectories", "mapping_matrix", "mc_rollout", "partition_network", "pretrain_d",
    "pretrain_g", "pretrain_h", "region_network", "sample_od", "save_network", "save_trajectories",
    "stochastic_generate", "synth_grid", "trajectory_rewards", "two_stage_generate",
]
