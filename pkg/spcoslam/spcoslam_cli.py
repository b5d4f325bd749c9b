import argparse
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from datetime import datetime
import hashlib
import itertools
import json
import logging
import os
import sys
from typing import Optional

import cv2
import pandas as pd

from spcoslam.base.artifacts import (
    ASSIGNMENTS_JSONL,
    EFFECTIVE_CONFIG,
    FINAL_MAP,
    FINAL_THETA,
    LM_JSON,
    METRICS_CSV,
    TRAJECTORY_CSV,
    ArtifactWriter,
    require_artifacts,
    run_directory,
)
from spcoslam.base.concepts import ConceptParams
from spcoslam.base.config import (
    METHODS,
    RunConfig,
    apply_overrides,
    config_from_dict,
    effective_threads,
    load_config,
)
from spcoslam.base.core import Pose2D, seeded_rng
from spcoslam.base.database import RunDatabase
from spcoslam.base.dataset import Dataset, generate_dataset, read_dataset, write_dataset
from spcoslam.base.errors import DatasetError, SpCoSLAMError
from spcoslam.base.evaluation import (
    ClusteringPair,
    ear,
    map_accuracy,
    nmi,
    place_recognition,
    pose_rmse,
    prr,
    query_utterance,
    segmentation_count_report,
    teaching_boxes,
)
from spcoslam.base.lexicon import LanguageModel
from spcoslam.base.rbpf import initialize, step
from spcoslam.base.slam import OccupancyGrid

DB_NAME = "run_history.db"
SWEEP_METRICS = "sweep_metrics.csv"
SWEEP_SUMMARY = "sweep_summary.csv"
SEGMENTATION_REPORT_CSV = "segmentation_report.csv"


def setup_logging(session_id):
    # Create logs directory if it doesn't exist
    os.makedirs("logs", exist_ok=True)

    log_file = f"logs/spcoslam_{session_id}.log"

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.INFO)
    root_logger.handlers.clear()

    file_handler = logging.FileHandler(log_file)
    stream_handler = logging.StreamHandler()

    formatter = logging.Formatter(
        fmt="%(asctime)s [%(levelname)-8s] [%(name)-30s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    file_handler.setFormatter(formatter)
    stream_handler.setFormatter(formatter)

    root_logger.addHandler(file_handler)
    root_logger.addHandler(stream_handler)

    logger = logging.getLogger(__name__)
    return logging.LoggerAdapter(logger, {"session_id": session_id})


def log_section(logger, title: str, width: int = 100):
    """Helper function to create consistent section headers"""
    padding = (width - len(title) - 2) // 2  # -2 for the spaces around title
    return logger.info("=" * padding + f" {title} " + "=" * padding)


def log_subsection(logger, title: str, width: int = 100):
    """Helper function to create consistent subsection headers"""
    padding = (width - len(title) - 2) // 2
    return logger.info("-" * padding + f" {title} " + "-" * padding)


def log_tree(logger, heading: str, items: list):
    logger.info(heading)
    for i, (key, value) in enumerate(items):
        branch = "└──" if i == len(items) - 1 else "├──"
        logger.info(f"{branch} {key}: {value}")


def cmd_dataset_gen(config: RunConfig, out_dir: str, logger) -> Dataset:
    config.validate()
    dataset = generate_dataset(config.world, config.dataset, seeded_rng(config.seed))
    write_dataset(dataset, out_dir)
    log_tree(
        logger,
        "Dataset Summary:",
        [
            ("Directory", out_dir),
            ("Steps", len(dataset.steps)),
            ("Teaching Events", len(dataset.teaching_events)),
            ("Places", len(dataset.world.places)),
            ("Names", len(dataset.world.names)),
        ],
    )
    return dataset


def cmd_run(config: RunConfig, logger, session_id: str, db: Optional[RunDatabase] = None) -> str:
    config.validate()
    if not config.dataset_dir:
        raise DatasetError("No dataset given (config dataset_dir or --dataset)")
    dataset = read_dataset(config.dataset_dir)
    world, steps = dataset.world, dataset.steps
    if steps[0].teaching is not None:
        raise DatasetError("The first step record cannot carry a teaching event")

    filter_config = config.filter_for_method()
    filter_config = replace(
        filter_config,
        recognition=replace(filter_config.recognition, alphabet=world.alphabet),
    )
    h = config.hyperparams
    rng = seeded_rng(config.seed)

    writer = ArtifactWriter(config, session_id, logger)
    run_dir = writer.create_directory()
    run_id = None
    if db is not None:
        run_id = db.record_run(
            session_id,
            "run",
            config.method,
            config.seed,
            filter_config.particles,
            config.to_dict(),
            run_dir,
        )

    log_tree(
        logger,
        "Run Parameters:",
        [
            ("Method", config.method),
            ("Seed", config.seed),
            ("Particles", filter_config.particles),
            ("Motion Samples (J)", filter_config.J),
            ("Threads", filter_config.threads),
            ("Dataset", config.dataset_dir),
            ("Output", run_dir),
        ],
    )

    state = initialize(filter_config, h, steps[0].true_pose, steps[0].scan, world.feature_dim)
    true_poses = [steps[0].true_pose]
    best = state.particles[0]
    n_teaching = 0
    try:
        for record in steps[1:]:
            teaching = None
            if record.teaching is not None:
                if config.max_teaching_steps is not None and n_teaching >= config.max_teaching_steps:
                    break
                n_teaching += 1
                teaching = (record.teaching.utterance, record.teaching.feature)
            step(state, record.control, record.scan, teaching, rng, filter_config, h)
            audit = state.last_audit
            best = audit.best
            writer.record_step(state, audit, best)
            true_poses.append(record.true_pose)
        writer.finalize(state, best, true_poses)
    except SpCoSLAMError:
        if db is not None:
            db.finish_run(run_id, "failed")
        raise

    if db is not None:
        db.finish_run(run_id, "ok")
    stats = writer.write_stats
    log_tree(
        logger,
        "Run Summary:",
        [
            ("Steps", state.t),
            ("Teaching Events", n_teaching),
            ("Concepts (L)", best.stats.L),
            ("Position Distributions (K)", best.stats.K),
            ("Maps Written", stats["maps"]),
            ("Theta Snapshots", stats["theta_snapshots"]),
            ("Failed Writes", stats["failed"]),
        ],
    )
    return run_dir


def _read_jsonl(path: str) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def cmd_eval(
    run_dir: str,
    dataset_dir: str,
    logger,
    session_id: Optional[str] = None,
    db: Optional[RunDatabase] = None,
) -> pd.DataFrame:
    require_artifacts(
        run_dir, EFFECTIVE_CONFIG, TRAJECTORY_CSV, FINAL_MAP, FINAL_THETA, LM_JSON, ASSIGNMENTS_JSONL
    )
    config = load_config(os.path.join(run_dir, EFFECTIVE_CONFIG))
    dataset = read_dataset(dataset_dir)
    world = dataset.world
    rows = []

    trajectory = pd.read_csv(os.path.join(run_dir, TRAJECTORY_CSV))
    final_step = int(trajectory["t"].iloc[-1])
    estimated = [Pose2D(r.x, r.y, r.theta) for r in trajectory.itertuples()]
    truth = [Pose2D(r.true_x, r.true_y, r.true_theta) for r in trajectory.itertuples()]
    rows.append((final_step, "pose_rmse", pose_rmse(estimated, truth)))
    image = cv2.imread(os.path.join(run_dir, FINAL_MAP), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DatasetError(f"Cannot read {FINAL_MAP} in {run_dir}")
    grid_spec = config.filter.grid
    grid = OccupancyGrid.from_image(image, grid_spec.resolution, grid_spec.origin)
    rows.append((final_step, "map_accuracy", map_accuracy(grid, world)))

    records = _read_jsonl(os.path.join(run_dir, ASSIGNMENTS_JSONL))
    events = dataset.teaching_events
    if records:
        name_labels = [world.name_index(world.places[e.true_place_id].name) for e in events]
        region_labels = [e.true_place_id for e in events]
        for record in records:
            n = len(record["concepts"])
            t = record["t"]
            rows.append((t, "curve_nmi_C", nmi(ClusteringPair(record["concepts"], name_labels[:n]))))
            rows.append((t, "curve_nmi_i", nmi(ClusteringPair(record["positions"], region_labels[:n]))))
            rows.append((t, "curve_L", record["L"]))
            rows.append((t, "curve_K", record["K"]))

        last = records[-1]
        n = len(last["concepts"])
        taught = events[:n]
        rows.append((final_step, "nmi_C", nmi(ClusteringPair(last["concepts"], name_labels[:n]))))
        rows.append((final_step, "nmi_i", nmi(ClusteringPair(last["positions"], region_labels[:n]))))
        rows.append((final_step, "ear_L", ear(len(set(name_labels[:n])), last["L"])))
        rows.append((final_step, "ear_K", ear(len(set(region_labels[:n])), last["K"])))
        report = segmentation_count_report(
            {config.method: [(r["t"], sum(len(w) for w in r["segmentation"])) for r in records]},
            references={
                "phrase": [e.true_segmentation for e in taught],
                "morpheme": [e.morpheme_segmentation or e.true_segmentation for e in taught],
            },
            steps=[r["t"] for r in records],
        )
        report.to_csv(os.path.join(run_dir, SEGMENTATION_REPORT_CSV), index=False)
        for r in report.itertuples():
            suffix = "" if r.configuration == config.method else f"_{r.configuration}"
            rows.append((r.step, f"curve_word_tokens{suffix}", r.word_tokens))
        final_counts = report.groupby("configuration")["word_tokens"].last()
        for label, count in sorted(final_counts.items()):
            suffix = "" if label == config.method else f"_{label}"
            rows.append((final_step, f"word_tokens{suffix}", count))

        with open(os.path.join(run_dir, FINAL_THETA)) as f:
            theta = json.load(f)
        with open(os.path.join(run_dir, LM_JSON)) as f:
            lm = LanguageModel.from_json(json.load(f))
        if theta["params"] is not None:
            params = ConceptParams.from_json(theta["params"])
            poses = [dataset.steps[e.t].true_pose for e in taught]
            boxes = teaching_boxes([e.true_place_id for e in taught], poses)
            noise = replace(config.filter.recognition, alphabet=world.alphabet)
            rng = seeded_rng(config.seed + config.query_seed_offset)
            taught_names = sorted({world.places[e.true_place_id].name for e in taught}, key=world.name_index)
            results = []
            for name in taught_names:
                index = world.name_index(name)
                query = query_utterance(world, name, rng.fork(0, index))
                result = place_recognition(query, params, lm, rng.fork(1, index), noise)
                result.target_regions = tuple(p.id for p in world.places if p.name == name)
                results.append(result)
            rows.append((final_step, "prr", prr(results, boxes)))
    else:
        logger.info("No teaching records: reporting SLAM metrics only")

    metrics = pd.DataFrame(rows, columns=["step", "metric", "value"])
    metrics["seed"] = config.seed
    metrics["method"] = config.method
    metrics.to_csv(os.path.join(run_dir, METRICS_CSV), index=False)

    if db is not None:
        run_id = db.record_run(session_id or "", "eval", config.method, config.seed, output_dir=run_dir)
        db.record_metrics(run_id, rows)
        db.finish_run(run_id, "ok")

    final = metrics[~metrics["metric"].str.startswith("curve_")]
    log_tree(logger, "Metrics:", [(r.metric, f"{r.value:.4f}") for r in final.itertuples()])
    return metrics


def _dataset_key(config: RunConfig) -> str:
    payload = json.dumps(
        {"world": asdict(config.world), "dataset": asdict(config.dataset)}, sort_keys=True
    )
    return hashlib.sha1(payload.encode()).hexdigest()[:10]


def _sweep_child(config_data: dict, session_id: str) -> pd.DataFrame:
    config = config_from_dict(config_data)
    logger = logging.LoggerAdapter(logging.getLogger(__name__), {"session_id": session_id})
    run_dir = cmd_run(config, logger, session_id)
    return cmd_eval(run_dir, config.dataset_dir, logger)


def cmd_sweep(
    configs: dict,
    seeds: list,
    out: str,
    logger,
    session_id: str,
    workers: int = 1,
    methods: Optional[list] = None,
) -> pd.DataFrame:
    """Run every labelled config for every method and seed, then aggregate the metrics per step."""
    if not configs:
        raise SpCoSLAMError("A sweep needs at least one config")
    jobs = []
    for label in sorted(configs):
        for method, seed in itertools.product(methods or [configs[label].method], seeds):
            config = replace(configs[label], seed=seed, method=method)
            dataset_dir = config.dataset_dir
            if not dataset_dir:
                dataset_dir = os.path.join(out, "datasets", _dataset_key(config), f"seed_{seed}")
                if not os.path.exists(os.path.join(dataset_dir, "steps.jsonl")):
                    cmd_dataset_gen(config, dataset_dir, logger)
            config = replace(config, dataset_dir=dataset_dir, out=os.path.join(out, label))
            jobs.append((label, config))

    frames = []
    failures = 0
    with ProcessPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [
            (label, config, pool.submit(_sweep_child, config.to_dict(), session_id))
            for label, config in jobs
        ]
        for label, config, future in futures:
            try:
                frame = future.result()
            except Exception as e:
                failures += 1
                logger.error(f"Sweep run {label}/{config.method}/seed_{config.seed} failed: {str(e)}")
                continue
            frame.insert(0, "label", label)
            frames.append(frame)

    os.makedirs(out, exist_ok=True)
    if not frames:
        raise SpCoSLAMError("Every sweep run failed")
    metrics = pd.concat(frames, ignore_index=True)
    metrics.to_csv(os.path.join(out, SWEEP_METRICS), index=False)
    summary = (
        metrics.groupby(["label", "method", "metric", "step"], sort=True)["value"]
        .agg(["mean", "median", "count"])
        .reset_index()
    )
    summary.to_csv(os.path.join(out, SWEEP_SUMMARY), index=False)
    log_tree(
        logger,
        "Sweep Summary:",
        [("Runs", len(jobs)), ("Failed", failures), ("Summary", os.path.join(out, SWEEP_SUMMARY))],
    )
    return summary


def build_parser():
    parser = argparse.ArgumentParser(
        description="Online spatial concept acquisition with grid SLAM"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="JSON run configuration file")
    common.add_argument("--seed", type=int, help="Random seed (overrides the config file)")
    common.add_argument("--out", type=str, help="Output directory (overrides the config file)")
    common.add_argument(
        "--method",
        type=str,
        choices=METHODS,
        help="Method or ablation to run (default: spcoslam)",
    )
    common.add_argument("--particles", type=int, help="Number of particles R (default: 30)")
    common.add_argument(
        "--steps",
        type=int,
        help="Teaching events to generate (dataset-gen) or to process at most (run)",
    )

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("dataset-gen", parents=[common], help="Generate a synthetic dataset")
    run = sub.add_parser("run", parents=[common], help="Run the filter over a dataset")
    run.add_argument("--dataset", type=str, help="Dataset directory")
    evaluate = sub.add_parser("eval", parents=[common], help="Compute metrics for a finished run")
    evaluate.add_argument(
        "--run-dir", type=str, help="Run directory (default: derived from --out/--method/--seed)"
    )
    evaluate.add_argument("--dataset", type=str, help="Dataset directory")
    sweep = sub.add_parser("sweep", parents=[common], help="Run configs over several seeds")
    sweep.add_argument("--configs", type=str, nargs="+", help="Config files, one label per file stem")
    sweep.add_argument("--seeds", type=int, nargs="+", help="Seeds to run (default: 0..9)")
    sweep.add_argument(
        "--methods",
        type=str,
        nargs="+",
        choices=METHODS,
        help="Methods to run for every config (default: each config's own method)",
    )
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    session_id = datetime.now().strftime("%Y%m%d_%H%M%S")
    logger = setup_logging(session_id)

    try:
        config = load_config(args.config)
        config = apply_overrides(
            config,
            seed=args.seed,
            method=args.method,
            out=args.out,
            particles=args.particles,
            steps=args.steps,
            dataset_dir=getattr(args, "dataset", None),
        )

        if args.command == "dataset-gen":
            log_section(logger, "Dataset Generation Started")
            cmd_dataset_gen(config, args.out or config.dataset_dir or config.out, logger)
            log_section(logger, "Dataset Generation Completed")

        elif args.command == "run":
            log_section(logger, "Run Started")
            os.makedirs(config.out, exist_ok=True)
            db = RunDatabase(os.path.join(config.out, DB_NAME))
            cmd_run(config, logger, session_id, db)
            log_section(logger, "Run Completed")

        elif args.command == "eval":
            log_section(logger, "Evaluation Started")
            run_dir = args.run_dir or run_directory(config.out, config.method, config.validate().seed)
            dataset_dir = config.dataset_dir
            if not dataset_dir:
                raise DatasetError("No dataset given (config dataset_dir or --dataset)")
            os.makedirs(config.out, exist_ok=True)
            db = RunDatabase(os.path.join(config.out, DB_NAME))
            cmd_eval(run_dir, dataset_dir, logger, session_id, db)
            log_section(logger, "Evaluation Completed")

        elif args.command == "sweep":
            log_section(logger, "Sweep Started")
            paths = args.configs or []
            configs = {
                os.path.splitext(os.path.basename(p))[0]: apply_overrides(
                    load_config(p),
                    method=args.method,
                    out=args.out,
                    particles=args.particles,
                    steps=args.steps,
                )
                for p in paths
            } or {"default": config}
            seeds = args.seeds or list(range(10))
            workers = effective_threads(os.cpu_count() or 1)
            os.makedirs(config.out, exist_ok=True)
            db = RunDatabase(os.path.join(config.out, DB_NAME))
            run_id = db.record_run(session_id, "sweep", output_dir=config.out)
            try:
                cmd_sweep(configs, seeds, config.out, logger, session_id, workers, args.methods)
            except SpCoSLAMError:
                db.finish_run(run_id, "failed")
                raise
            db.finish_run(run_id, "ok")
            log_section(logger, "Sweep Completed")

    except SpCoSLAMError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        sys.exit(e.exit_code)


if __name__ == "__main__":
    main()
