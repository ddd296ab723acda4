"""Stream definitions, run configuration and end-to-end benchmark runs."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .continual import (
    KINDS, StreamSpec, new_state, policy_for_task, random_policy, save_strategy, task_seed, train_next,
)
from .datasets import Dataset, generate_dataset, load_dataset, save_dataset
from .maze_sim import FAMILY_EXTENT, get_maze
from .metrics import (
    SuccessMatrix, aggregate, cell_metrics, dumps_report, evaluate_success, measure_inf, metrics_csv,
    radar_json,
)
from .policies import TrainConfig

SCHEMA_VERSION = 1

_STREAMS = {
    "AR1": ("A-LOOX", "A-HXOX", "A-LXOX", "A-HXOX"),
    "AR2": ("A-HXOO", "A-HOOX", "A-LOOX", "A-LXOO"),
    "AT1": ("A-HOOX", "A-HXOX", "A-HXOX", "A-HOOX"),
    "AT2": ("A-LOOO", "A-LOOO", "A-LXOX", "A-LXOO"),
    "ST1": ("S-BASE", "S-OXO", "S-BASE", "S-OOX"),
    "ST2": ("S-BASE", "S-OXX", "S-XOO", "S-OXX"),
}


def builtin_streams() -> Dict[str, StreamSpec]:
    return {name: StreamSpec(name, tasks) for name, tasks in _STREAMS.items()}


def get_stream(name: str) -> StreamSpec:
    streams = builtin_streams()
    if name not in streams:
        raise KeyError(f"unknown stream {name!r}; valid streams: {', '.join(streams)}")
    return streams[name]


@dataclass
class RunConfig:
    stream: Union[str, dict] = "ST1"
    methods: List[str] = field(default_factory=lambda: list(KINDS))
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    steps_per_task: int = 20000
    scale: str = "desk"
    dataset_source: str = "generate"
    dataset_dir: Optional[str] = None
    output_dir: str = "runs/default"
    n_episodes: Optional[int] = None
    noise: float = 0.05
    data_seed: int = 1
    eval_episodes: int = 100
    eval_seed: int = 1_000_000
    inf_passes: int = 10000
    hyper: dict = field(default_factory=dict)
    batch_size: int = 64
    lr: float = 3e-4
    her_fraction: float = 0.5
    save_checkpoints: bool = True

    def __post_init__(self):
        if not self.methods:
            raise ValueError("a run needs at least one method")
        if not self.seeds:
            raise ValueError("a run needs at least one seed")
        bad = [m for m in self.methods if m not in KINDS]
        if bad:
            raise ValueError(f"unknown method(s) {', '.join(bad)}; valid methods: {', '.join(KINDS)}")
        if self.scale not in ("desk", "paper"):
            raise ValueError("scale must be 'desk' or 'paper'")
        if self.dataset_source not in ("generate", "load"):
            raise ValueError("dataset_source must be 'generate' or 'load'")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config field(s): {', '.join(sorted(extra))}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def stream_spec(self) -> StreamSpec:
        if isinstance(self.stream, str):
            return get_stream(self.stream)
        return StreamSpec(self.stream["name"], tuple(self.stream["tasks"]), tuple(self.stream.get("datasets", ())))

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps_per_task, batch_size=self.batch_size, lr=self.lr,
                           her_fraction=self.her_fraction)


def stream_datasets(cfg: RunConfig, stream: StreamSpec) -> List[Dataset]:
    """One dataset per task; revisited mazes share their dataset."""
    cache: Dict[str, Dataset] = {}
    out = []
    for t, maze_name in enumerate(stream.tasks):
        if maze_name not in cache:
            if cfg.dataset_source == "load":
                if stream.datasets:
                    path = stream.datasets[t]
                elif cfg.dataset_dir:
                    path = Path(cfg.dataset_dir) / f"{maze_name}.jsonl"
                else:
                    raise ValueError("dataset_source 'load' needs dataset_dir or per-task dataset paths")
                cache[maze_name] = load_dataset(path)
            else:
                cache[maze_name] = generate_dataset(get_maze(maze_name), cfg.n_episodes, cfg.noise, cfg.data_seed)
        out.append(cache[maze_name])
    return out


def rand_seed(seed: int, task_index: int) -> int:
    """Seed of the untrained FWT baseline network for one task."""
    return task_seed(seed, 10_000 + task_index)


_RAND_CACHE: Dict[tuple, float] = {}


def random_success(cfg: RunConfig, family: str, maze_name: str, seed: int, task_index: int) -> float:
    key = (family, cfg.scale, maze_name, rand_seed(seed, task_index), cfg.eval_episodes, cfg.eval_seed)
    if key not in _RAND_CACHE:
        pol = random_policy(family, rand_seed(seed, task_index), cfg.scale)
        _RAND_CACHE[key] = evaluate_success(pol, get_maze(maze_name), cfg.eval_episodes, cfg.eval_seed)
    return _RAND_CACHE[key]


def run_cell(cfg: RunConfig, stream: StreamSpec, datasets: List[Dataset], method: str, seed: int,
             checkpoint_dir: Optional[Path] = None) -> dict:
    """Train one (method, seed) over the stream and compute its metrics.

    Any exception is caught and reported so other cells are unaffected.
    """
    try:
        family = stream.family
        n = len(stream)
        tcfg = cfg.train_config()
        state = new_state(method, family, seed, cfg.hyper, cfg.scale)
        m = SuccessMatrix(n, eval_episodes=cfg.eval_episodes, eval_seed=cfg.eval_seed)
        for i in range(n):
            state = train_next(state, i, datasets[i], tcfg, seed)
            seen = {}
            for j in range(n):
                if j <= i or j == i + 1:
                    key = (policy_slot(state, j, i + 1), stream.tasks[j])
                    if key not in seen:
                        seen[key] = evaluate_success(policy_for_task(state, j, i + 1), get_maze(stream.tasks[j]),
                                                     cfg.eval_episodes, cfg.eval_seed)
                    m.sigma[i, j] = seen[key]
        for j in range(n):
            m.sigma_rand[j] = random_success(cfg, family, stream.tasks[j], seed, j)
        ext = FAMILY_EXTENT[family]
        inf = measure_inf(policy_for_task(state, n - 1), 64, cfg.inf_passes, seed, (ext, ext))
        metrics = cell_metrics(m, state, state.reference_count, inf)
        if checkpoint_dir is not None:
            save_strategy(state, checkpoint_dir)
        return {
            "method": method, "seed": int(seed), "status": "ok", "metrics": metrics,
            "success_matrix": m.to_dict(), "train_minutes": state.train_minutes,
            "param_ledger": state.param_ledger, "hispo_log": state.hispo_log,
        }
    except Exception as e:  # crash isolation: record and move on
        return {"method": method, "seed": int(seed), "status": "failed", "error": f"{type(e).__name__}: {e}"}


def policy_slot(state, j: int, i: int):
    """Hashable identity of the parameters ``policy_for_task(state, j, i)`` would use."""
    c = min(j, i - 1)
    if state.kind in ("SCN", "FTN", "PNN", "HiSPO"):
        return (state.kind, c)
    return (state.kind, "current")


def _cell_job(args):
    return run_cell(*args)


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("CONTNAV_THREADS", "1")))
    except ValueError:
        return 1


def run(cfg: RunConfig, log=None) -> dict:
    """Run every (method, seed) cell, then write metrics.json, metrics.csv and radar.json."""
    stream = cfg.stream_spec()
    datasets = stream_datasets(cfg, stream)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for method in cfg.methods:
        for seed in cfg.seeds:
            ck = out / "checkpoints" / method / f"seed_{seed}" if cfg.save_checkpoints else None
            jobs.append((cfg, stream, datasets, method, seed, ck))
    workers = n_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            cells = list(ex.map(_cell_job, jobs))
    else:
        cells = []
        for job in jobs:
            cells.append(_cell_job(job))
            if log:
                c = cells[-1]
                log(f"{c['method']} seed {c['seed']}: {c['status']}"
                    + (f" PER={c['metrics']['PER']:.3f}" if c["status"] == "ok" else f" ({c['error']})"))
    methods = {}
    for method in cfg.methods:
        mine = [c for c in cells if c["method"] == method]
        ok = [c["metrics"] for c in mine if c["status"] == "ok"]
        methods[method] = {"cells": mine, "aggregate": aggregate(ok),
                           "failed_seeds": [c["seed"] for c in mine if c["status"] != "ok"]}
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": {**cfg.to_dict(), "output_dir": None},
        "reference_count": new_state("SC1", stream.family, 0, cfg.hyper, cfg.scale).reference_count,
        "streams": {stream.name: methods},
    }
    write_report(report, out)
    return report


def write_report(report: dict, out) -> None:
    out = Path(out)
    (out / "metrics.json").write_text(dumps_report(report))
    (out / "metrics.csv").write_text(metrics_csv(report))
    (out / "radar.json").write_text(json.dumps(radar_json(report), indent=1, sort_keys=True) + "\n")


def save_stream_datasets(cfg: RunConfig, directory) -> List[Path]:
    """Materialize the datasets a config would use (one file per distinct maze)."""
    stream = cfg.stream_spec()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for maze_name, ds in dict(zip(stream.tasks, stream_datasets(cfg, stream))).items():
        p = d / f"{maze_name}.jsonl"
        save_dataset(ds, p)
        paths.append(p)
    return paths
