"""``roadtraj`` command line: synth, ingest, partition, pipeline, generate, evaluate.

Exit codes:
    0  success
    1  unexpected internal error
    2  usage or configuration error
    3  missing or unparsable input file
    4  data validation error (referential integrity, continuity, coordinates)
    5  generation produced no trajectory
    6  pipeline stage failure
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import exceptions as ex
from .metrics import evaluate, heatmap_csv
from .pipeline import (
    ConfigError, StageError, evaluate_against, generate, load_artifacts, load_config, run_pipeline,
)
from .regions import boundary_sets, dumps_boundaries, dumps_partition, partition_network
from .roadnet import load_network, save_network, synth_grid
from .trajectory import (
    check_trajectory_segments, load_trajectories, preprocess_corpus, save_trajectories,
    synth_shortest_path_corpus,
)

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INPUT, EXIT_DATA, EXIT_GENERATION, EXIT_STAGE = range(7)

log = logging.getLogger("roadtraj")


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_synth(a):
    net = synth_grid(a.rows, a.cols, a.one_way_fraction, a.seed)
    save_network(net, a.out)
    print(f"wrote {len(net)} segments, {net.n_edges()} edges to {a.out}")
    if a.trajectories:
        out = a.trajectories_out or os.path.splitext(a.out)[0] + ".traj.txt"
        corpus = synth_shortest_path_corpus(net, a.trajectories, a.seed, n_od_pairs=a.od_pairs)
        save_trajectories(corpus, out)
        print(f"wrote {len(corpus)} trajectories to {out}")
    return EXIT_OK


def cmd_ingest(a):
    net = load_network(a.network)
    corpus = load_trajectories(a.trajectories)
    check_trajectory_segments(corpus, net)
    kept = preprocess_corpus(corpus, a.min_length)
    save_trajectories(kept, a.out)
    print(f"kept {len(kept)} of {len(corpus)} trajectories (min length {a.min_length}, no loops)")
    return EXIT_OK


def cmd_partition(a):
    net = load_network(a.network)
    corpus = load_trajectories(a.corpus) if a.corpus else []
    p = partition_network(net, a.k, a.epsilon, seed=a.seed)
    _write(a.out, dumps_partition(p, net))
    if a.boundaries_out:
        _write(a.boundaries_out, dumps_boundaries(boundary_sets(net, p, corpus)))
    print(f"k={p.k} cut={p.cut} blocks={p.block_sizes()} limit={p.max_block()}")
    return EXIT_OK


def _overrides(a, keys):
    return {k: getattr(a, k, None) for k in keys}


RUN_KEYS = ("network", "corpus", "workdir", "seed", "k", "epsilon", "budget", "count", "mode",
            "retries", "scenario", "micro_sample_size", "od_source")


def _config(a):
    over = _overrides(a, RUN_KEYS)
    if getattr(a, "rounds", None) is not None:
        over["adv_rounds"] = a.rounds
    for item in getattr(a, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    return load_config(a.config, over)


def cmd_pipeline(a):
    cfg = _config(a)
    ran = run_pipeline(cfg, restart=a.restart, stop_after=a.stop_after)
    print("stages run: " + (", ".join(ran) if ran else "none (all checkpoints present)"))
    return EXIT_OK


def cmd_generate(a):
    cfg = _config(a)
    art = load_artifacts(cfg)
    trajs, failures = generate(cfg, art, checkpoint=a.checkpoint)
    save_trajectories(trajs, a.out)
    partial = sum(1 for t in trajs if t.info.get("partial"))
    print(f"wrote {len(trajs)} trajectories to {a.out} ({partial} partial, {len(failures)} failed tasks)")
    for tid, task, reason in failures:
        print(f"task {tid} {task[:2]} failed after {cfg.retries} retries: {reason}", file=sys.stderr)
    return EXIT_OK if trajs else EXIT_GENERATION


def cmd_evaluate(a):
    net = load_network(a.network)
    real = load_trajectories(a.real)
    gen = load_trajectories(a.generated)
    check_trajectory_segments(real, net)
    check_trajectory_segments(gen, net)
    rep = evaluate(real, gen, net, a.micro_sample_size, seed=a.seed)
    _write(a.out_prefix + ".txt", rep.to_text())
    _write(a.out_prefix + ".csv", rep.to_csv())
    if a.heatmap:
        _write(a.out_prefix + ".heatmap.csv", heatmap_csv(gen, net))
    sys.stdout.write(rep.to_text())
    return EXIT_OK


def cmd_report(a):
    """Evaluate generated output against the held-out split of a finished pipeline."""
    cfg = _config(a)
    art = load_artifacts(cfg)
    rep = evaluate_against(cfg, art, load_trajectories(a.generated))
    _write(a.out_prefix + ".txt", rep.to_text())
    _write(a.out_prefix + ".csv", rep.to_csv())
    sys.stdout.write(rep.to_text())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="roadtraj", description="Road-network trajectory generation.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic grid network (and optional corpus)")
    s.add_argument("rows", type=int)
    s.add_argument("cols", type=int)
    s.add_argument("one_way_fraction", type=float)
    s.add_argument("seed", type=int)
    s.add_argument("out")
    s.add_argument("--trajectories", type=int, default=0, help="also write N shortest-path trajectories")
    s.add_argument("--trajectories-out")
    s.add_argument("--od-pairs", type=int, default=100)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="validate and clean a trajectory file")
    s.add_argument("--network", required=True)
    s.add_argument("--trajectories", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-length", type=int, default=5)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("partition", help="partition a network into structural regions")
    s.add_argument("--network", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--epsilon", type=float, default=0.03)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--corpus")
    s.add_argument("--boundaries-out")
    s.set_defaults(func=cmd_partition)

    def run_flags(s):
        s.add_argument("--config")
        s.add_argument("--network")
        s.add_argument("--corpus")
        s.add_argument("--workdir")
        s.add_argument("--seed", type=int)
        s.add_argument("--k", type=int)
        s.add_argument("--epsilon", type=float)
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    s = sub.add_parser("pipeline", help="run the staged training pipeline (resumable)")
    run_flags(s)
    s.add_argument("--rounds", type=int, help="adversarial rounds (0 = pretrained only)")
    s.add_argument("--restart", action="store_true", help="discard existing checkpoints")
    s.add_argument("--stop-after", help="stop after the named stage")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("generate", help="generate trajectories from pipeline checkpoints")
    run_flags(s)
    s.add_argument("--count", type=int)
    s.add_argument("--mode", choices=("two-stage", "astar", "stochastic"))
    s.add_argument("--budget", type=int)
    s.add_argument("--retries", type=int)
    s.add_argument("--scenario")
    s.add_argument("--od-source", dest="od_source", choices=("train", "valid", "test"))
    s.add_argument("--checkpoint", help="road-model checkpoint to use instead of the final one")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="compare generated with real trajectories")
    s.add_argument("--network", required=True)
    s.add_argument("--real", required=True)
    s.add_argument("--generated", required=True)
    s.add_argument("--out-prefix", required=True)
    s.add_argument("--micro-sample-size", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--heatmap", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="evaluate against the held-out split of a pipeline workdir")
    run_flags(s)
    s.add_argument("--generated", required=True)
    s.add_argument("--micro-sample-size", dest="micro_sample_size", type=int)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_report)
    return p


def exit_code_for(exc):
    if isinstance(exc, StageError):
        return EXIT_STAGE
    if isinstance(exc, (ConfigError, ex.InvalidArgumentError, ex.InvalidSizeError)):
        return EXIT_USAGE
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError, ex.NetworkParseError)):
        return EXIT_INPUT
    if isinstance(exc, (ex.ReferentialIntegrityError, ex.MissingSegmentError,
                        ex.DiscontinuousTrajectoryError, ex.InvalidCoordinateError, ex.EmptyCorpusError)):
        return EXIT_DATA
    if isinstance(exc, (ex.TwoStageError, ex.SearchBudgetError, ex.UnreachableError)):
        return EXIT_GENERATION
    if isinstance(exc, (ValueError, OSError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


def main(argv=None):
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except Exception as exc:  # noqa: BLE001  mapped to documented exit codes
        code = exit_code_for(exc)
        print(f"roadtraj {a.command}: error: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            log.exception("unexpected failure")
        return code


if __name__ == "__main__":
    sys.exit(main())
