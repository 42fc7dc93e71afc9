import filecmp

import pytest

from roadtraj.pipeline import STAGE_ORDER, ConfigError, StageError, load_artifacts, load_config, run_pipeline
from roadtraj.roadnet import save_network, synth_grid
from roadtraj.trajectory import Trajectory, save_trajectories, synth_shortest_path_corpus

KEYS = dict(hidden="8", d_seg="4", d_time="2", d_s="4", mlp_hidden="4", epochs_g="1", epochs_h="1",
            epochs_d="1", adv_rounds="2", adv_batch="4", rollouts="2", k="3", min_length="3")


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    net = synth_grid(5, 5, 0.0, 1)
    save_network(net, d / "net.txt")
    save_trajectories(synth_shortest_path_corpus(net, 120, 0, n_od_pairs=20, min_length=3), d / "c.txt")
    return d


def _cfg(data, work, **extra):
    return load_config(None, {**KEYS, "network": str(data / "net.txt"), "corpus": str(data / "c.txt"),
                              "workdir": str(data / work), **extra})


def test_resume_matches_uninterrupted(data):
    full = _cfg(data, "full")
    assert run_pipeline(full) == list(STAGE_ORDER)
    part = _cfg(data, "part")
    assert run_pipeline(part, stop_after="pretrain_h")[-1] == "pretrain_h"
    assert run_pipeline(part)[0] == "region_g"
    assert run_pipeline(part) == []
    for name in ("trainlog.csv", "partition.txt", "boundaries.txt"):
        assert filecmp.cmp(data / "full" / name, data / "part" / name, shallow=False)
    for name in ("road.npz", "disc.npz", "region.npz"):
        assert filecmp.cmp(data / "full" / "checkpoints" / name, data / "part" / "checkpoints" / name,
                           shallow=False)
    art = load_artifacts(full)
    assert len(art.train) + len(art.valid) + len(art.test) == 120


def test_config_mismatch_and_restart(data):
    cfg = _cfg(data, "mm")
    run_pipeline(cfg, stop_after="split")
    with pytest.raises(ConfigError):
        run_pipeline(_cfg(data, "mm", seed="9"))
    assert run_pipeline(_cfg(data, "mm", seed="9"), restart=True, stop_after="split") == ["split"]


def test_incomplete_workdir(data):
    with pytest.raises(ConfigError):
        load_artifacts(_cfg(data, "empty"))


def test_stage_failure_is_wrapped(data, tmp_path):
    save_trajectories([Trajectory([0], [0.0])], tmp_path / "tiny.txt")
    cfg = load_config(None, {**KEYS, "network": str(data / "net.txt"), "corpus": str(tmp_path / "tiny.txt"),
                             "workdir": str(tmp_path / "w")})
    with pytest.raises(StageError) as e:
        run_pipeline(cfg)
    assert e.value.stage == "split"
