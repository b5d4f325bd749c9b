"""
Run artifacts

Every run owns <out>/<method>/seed_<seed>/ and writes into it:
- maps/step_XXXX.pgm and theta/step_XXXX.json at the configured cadence
- weights.csv, assignments.jsonl, segmentation_counts.csv, trajectory.csv
- lm.json, final_map.pgm, final_theta.json and effective_config.json
"""

import json
import logging
import os
from typing import Any, Optional

import cv2
import pandas as pd

from spcoslam.base.concepts import position_top_words
from spcoslam.base.config import RunConfig, dump_config
from spcoslam.base.errors import DatasetError
from spcoslam.base.rbpf import FilterState, Particle, StepAudit

MAPS_DIR = "maps"
THETA_DIR = "theta"
WEIGHTS_CSV = "weights.csv"
ASSIGNMENTS_JSONL = "assignments.jsonl"
SEGMENTATION_CSV = "segmentation_counts.csv"
TRAJECTORY_CSV = "trajectory.csv"
LM_JSON = "lm.json"
FINAL_MAP = "final_map.pgm"
FINAL_THETA = "final_theta.json"
EFFECTIVE_CONFIG = "effective_config.json"
METRICS_CSV = "metrics.csv"


def run_directory(output_dir: str, method: str, seed: int) -> str:
    return os.path.join(output_dir, method, f"seed_{seed}")


def _json_dump(data: Any, path: str) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)


class ArtifactWriter:
    def __init__(
        self,
        config: RunConfig,
        session_id: str,
        logger: Optional[logging.Logger] = None,
    ):
        self.config = config
        self.method = config.method
        self.seed = config.seed
        self.output_dir = config.out
        self.every = config.artifact_every
        self.session_id = session_id
        self.logger = logger or logging.LoggerAdapter(
            logging.getLogger(__name__), {"session_id": session_id}
        )

        self.write_stats = {
            "maps": 0,
            "theta_snapshots": 0,
            "teaching_records": 0,
            "weight_rows": 0,
            "failed": 0,
        }
        self._weight_rows: list[dict] = []
        self._segmentation_rows: list[dict] = []

    def get_directory(self) -> str:
        """Get the run directory path."""
        return run_directory(self.output_dir, self.method, self.seed)

    def create_directory(self) -> str:
        directory = self.get_directory()
        os.makedirs(os.path.join(directory, MAPS_DIR), exist_ok=True)
        os.makedirs(os.path.join(directory, THETA_DIR), exist_ok=True)
        # assignments are appended step by step
        open(os.path.join(directory, ASSIGNMENTS_JSONL), "w").close()
        dump_config(self.config, os.path.join(directory, EFFECTIVE_CONFIG))
        return directory

    def _path(self, *parts: str) -> str:
        return os.path.join(self.get_directory(), *parts)

    def _write_map(self, particle: Particle, path: str) -> None:
        if cv2.imwrite(path, particle.grid.to_image()):
            self.write_stats["maps"] += 1
        else:
            self.write_stats["failed"] += 1
            self.logger.error(f"Failed to write map image {path}")

    def _theta_snapshot(self, state: FilterState, particle: Particle) -> dict:
        params = particle.params
        return {
            "t": state.t,
            "particle": particle.id,
            "params": params.to_json() if params is not None else None,
            "position_words": [
                [[w, p] for w, p in position_top_words(params, k, state.lm)] for k in range(params.K)
            ]
            if params is not None
            else [],
            "positions": list(particle.positions),
            "concepts": list(particle.concepts),
        }

    def record_step(self, state: FilterState, audit: StepAudit, best: Particle) -> None:
        """Collect the weight trace and write whatever this step is due for."""
        for slot, update in enumerate(audit.updates):
            self._weight_rows.append(
                {
                    "step": audit.t,
                    "particle": slot,
                    "log_weight_prev": update.log_weight_prev,
                    "log_wz": update.log_wz,
                    "log_wf": update.log_wf,
                    "log_ws": update.log_ws,
                    "log_weight": update.log_weight,
                    "ess": audit.ess,
                    "resampled": audit.resampled,
                }
            )
        self.write_stats["weight_rows"] += len(audit.updates)

        if audit.teaching:
            self._record_teaching(state, best)
        if audit.t % self.every == 0:
            name = f"step_{audit.t:04d}"
            self._write_map(best, self._path(MAPS_DIR, f"{name}.pgm"))
            if best.params is not None:
                _json_dump(self._theta_snapshot(state, best), self._path(THETA_DIR, f"{name}.json"))
                self.write_stats["theta_snapshots"] += 1

    def _record_teaching(self, state: FilterState, best: Particle) -> None:
        record = {
            "t": state.t,
            "event": len(state.lattices) - 1,
            "particle": best.id,
            "positions": list(best.positions),
            "concepts": list(best.concepts),
            "segmentation": [list(words.words) for words in best.segmentations],
            "lattice": state.lattices[-1].to_json(),
            "L": best.stats.L,
            "K": best.stats.K,
        }
        with open(self._path(ASSIGNMENTS_JSONL), "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        self._segmentation_rows.append(
            {
                "step": state.t,
                "event": len(state.lattices) - 1,
                "word_tokens": sum(len(words) for words in best.segmentations),
            }
        )
        self.write_stats["teaching_records"] += 1

    def finalize(self, state: FilterState, best: Particle, true_poses: list) -> None:
        pd.DataFrame(self._weight_rows).to_csv(self._path(WEIGHTS_CSV), index=False)
        pd.DataFrame(
            self._segmentation_rows, columns=["step", "event", "word_tokens"]
        ).to_csv(self._path(SEGMENTATION_CSV), index=False)
        pd.DataFrame(
            {
                "t": range(len(best.trajectory)),
                "x": [p.x for p in best.trajectory],
                "y": [p.y for p in best.trajectory],
                "theta": [p.theta for p in best.trajectory],
                "true_x": [p.x for p in true_poses],
                "true_y": [p.y for p in true_poses],
                "true_theta": [p.theta for p in true_poses],
            }
        ).to_csv(self._path(TRAJECTORY_CSV), index=False)
        _json_dump(state.lm.to_json(), self._path(LM_JSON))
        self._write_map(best, self._path(FINAL_MAP))
        _json_dump(self._theta_snapshot(state, best), self._path(FINAL_THETA))


def require_artifacts(run_dir: str, *names: str) -> None:
    missing = [n for n in names if not os.path.exists(os.path.join(run_dir, n))]
    if missing:
        raise DatasetError(f"Run directory {run_dir} is missing {', '.join(missing)}")
