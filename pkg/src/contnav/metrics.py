"""Success evaluation and the six continual-learning metrics."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .maze_sim import MazeSpec, OBS_DIM, SimConfig, observe, reset, step
from .maze_sim import Action

METRICS = ("PER", "BWT", "FWT", "MEM", "INF", "TRN")
# higher is worse on these axes; radar scores are inverted for them
COST_METRICS = ("MEM", "INF", "TRN")
TIMING_KEYS = ("INF", "TRN", "train_minutes", "INF_std", "TRN_std")


class IncompleteMatrixError(ValueError):
    pass


# -- evaluation ---------------------------------------------------------------

def evaluate_success(policy, maze: MazeSpec, n_episodes: int = 100, eval_seed: int = 0,
                     config: Optional[SimConfig] = None, seeds: Optional[Sequence[int]] = None) -> float:
    """Fraction of seeded episodes that reach the goal; all episodes run in lockstep.

    ``policy`` exposes ``reset(n)`` and ``act_batch(obs, goals, step_index, rows)``.
    """
    config = config or SimConfig()
    seeds = list(range(eval_seed, eval_seed + n_episodes)) if seeds is None else list(seeds)
    if not seeds:
        raise ValueError("n_episodes must be >= 1")
    n = len(seeds)
    states, goals = [], []
    for s in seeds:
        st, g = reset(maze, config, s)
        states.append(st)
        goals.append(g)
    goals = np.array(goals)
    obs = np.array([observe(maze, s) for s in states])
    success = np.zeros(n, dtype=bool)
    active = np.arange(n)
    policy.reset(n)
    t = 0
    while active.size:
        acts = policy.act_batch(obs[active], goals[active], t, rows=active)
        keep = []
        for r, a in zip(active, acts):
            states[r], obs[r], rew, done = step(maze, config, states[r], Action.from_array(a), tuple(goals[r]))
            if rew == 1.0:
                success[r] = True
            if not done:
                keep.append(r)
        active = np.array(keep, dtype=np.int64)
        t += 1
    return float(success.mean())


# -- success matrix -----------------------------------------------------------

@dataclass
class SuccessMatrix:
    """sigma[i, j]: success after task i on task j (0-based); NaN where not evaluated."""

    n: int
    sigma: np.ndarray = None
    sigma_rand: np.ndarray = None
    eval_episodes: int = 100
    eval_seed: int = 0

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = np.full((self.n, self.n), np.nan)
        if self.sigma_rand is None:
            self.sigma_rand = np.full(self.n, np.nan)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.sigma_rand = np.asarray(self.sigma_rand, dtype=np.float64)
        vals = np.concatenate([self.sigma.ravel(), self.sigma_rand])
        vals = vals[np.isfinite(vals)]
        if ((vals < 0) | (vals > 1)).any():
            raise ValueError("success rates must lie in [0, 1]")

    def required_cells(self):
        """Cells the protocol fills: i >= j, plus i = j - 1 for forward transfer."""
        return [(i, j) for i in range(self.n) for j in range(self.n) if i >= j or i == j - 1]

    def to_dict(self) -> dict:
        nan = lambda v: None if not math.isfinite(v) else float(v)
        return {"n": self.n, "sigma": [[nan(v) for v in row] for row in self.sigma],
                "sigma_rand": [nan(v) for v in self.sigma_rand],
                "eval_episodes": self.eval_episodes, "eval_seed": self.eval_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SuccessMatrix":
        un = lambda v: np.nan if v is None else v
        return cls(d["n"], np.array([[un(v) for v in row] for row in d["sigma"]], dtype=np.float64),
                   np.array([un(v) for v in d["sigma_rand"]], dtype=np.float64),
                   d.get("eval_episodes", 100), d.get("eval_seed", 0))


def _need(values: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(values).all():
        raise IncompleteMatrixError(f"success matrix is missing {what}")
    return values


def compute_per(m: SuccessMatrix) -> float:
    """Mean final-model success over all tasks."""
    return float(np.mean(_need(m.sigma[m.n - 1], "the final row")))


def compute_bwt(m: SuccessMatrix) -> float:
    """Mean change from just-learned to final success."""
    final = _need(m.sigma[m.n - 1], "the final row")
    diag = _need(np.diag(m.sigma), "diagonal entries")
    return float(np.mean(final - diag))


def compute_fwt(m: SuccessMatrix) -> float:
    """Mean gain of the just-trained model over an untrained one."""
    diag = _need(np.diag(m.sigma), "diagonal entries")
    rand = _need(m.sigma_rand, "random-init baselines")
    return float(np.mean(diag - rand))


def compute_mem(state, reference_count: int, mode: str = "inference") -> float:
    """Parameter count after the last task relative to the reference backbone."""
    if reference_count <= 0:
        raise ValueError("reference_count must be positive")
    ledger = state.param_ledger if hasattr(state, "param_ledger") else state
    if not ledger:
        raise ValueError("parameter-count ledger is empty")
    mode = mode.lower()
    if mode not in ("inference", "training"):
        raise ValueError(f"mode must be inference or training, got {mode!r}")
    return ledger[-1][mode] / reference_count


def record_trn(ledger: Sequence[float]) -> float:
    """Total training minutes."""
    ledger = list(getattr(ledger, "train_minutes", ledger))
    if not ledger:
        raise ValueError("training-cost ledger is empty")
    return float(sum(ledger))


def measure_inf(policy, batch_size: int = 64, n_passes: int = 10000, seed: int = 0,
                goal_scale=(20.0, 20.0)) -> float:
    """Mean milliseconds per batched decision, replanning amortized over passes."""
    if n_passes < 1:
        raise ValueError("n_passes must be >= 1")
    rng = np.random.default_rng(seed)
    obs = rng.random((batch_size, OBS_DIM))
    goals = rng.random((batch_size, 2)) * np.asarray(goal_scale)
    policy.reset(batch_size)
    for i in range(min(10, n_passes)):
        policy.act_batch(obs, goals, i)
    t0 = time.perf_counter()
    for i in range(n_passes):
        policy.act_batch(obs, goals, i)
    return (time.perf_counter() - t0) * 1000.0 / n_passes


# -- reports ------------------------------------------------------------------

def cell_metrics(m: SuccessMatrix, state, reference_count: int, inf_ms: float) -> Dict[str, float]:
    return {
        "PER": compute_per(m), "BWT": compute_bwt(m), "FWT": compute_fwt(m),
        "MEM": compute_mem(state, reference_count, "inference"),
        "MEM_training": compute_mem(state, reference_count, "training"),
        "INF": float(inf_ms), "TRN": record_trn(state.train_minutes),
    }


def aggregate(cells: Sequence[Dict[str, float]]) -> Dict[str, float]:
    """Mean and sample standard deviation across seeds."""
    out = {}
    if not cells:
        return out
    for key in cells[0]:
        vals = np.array([c[key] for c in cells], dtype=np.float64)
        out[key] = float(vals.mean())
        out[key + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out


def radar_scores(means: Dict[str, Dict[str, float]]) -> Dict[str, Dict[str, float]]:
    """Per-axis min-max normalization over methods; cost axes inverted so 1 is best."""
    methods = sorted(means)
    out = {m: {} for m in methods}
    for ax in METRICS:
        vals = np.array([means[m].get(ax, np.nan) for m in methods], dtype=np.float64)
        ok = np.isfinite(vals)
        lo, hi = (vals[ok].min(), vals[ok].max()) if ok.any() else (0.0, 0.0)
        for m, v in zip(methods, vals):
            if not math.isfinite(v):
                out[m][ax] = None
                continue
            s = 1.0 if hi == lo else (v - lo) / (hi - lo)
            out[m][ax] = float(1.0 - s if ax in COST_METRICS and hi != lo else s)
    return out


def metrics_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stream", "method", "metric", "mean", "std"])
    for stream, methods in sorted(report["streams"].items()):
        for method, entry in sorted(methods.items()):
            agg = entry.get("aggregate", {})
            for metric in METRICS + ("MEM_training",):
                if metric in agg:
                    w.writerow([stream, method, metric, repr(agg[metric]), repr(agg[metric + "_std"])])
    return buf.getvalue()


def radar_json(report: dict) -> dict:
    return {stream: radar_scores({m: e.get("aggregate", {}) for m, e in methods.items()})
            for stream, methods in sorted(report["streams"].items())}


def zero_timings(obj):
    """Copy of a report with every wall-clock field set to 0 (for reproducibility diffs)."""
    if isinstance(obj, dict):
        return {k: (zero_timings_value(v) if k in TIMING_KEYS else zero_timings(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [zero_timings(v) for v in obj]
    return obj


def zero_timings_value(v):
    if isinstance(v, list):
        return [0.0 for _ in v]
    return 0.0


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True, allow_nan=False) + "\n"
