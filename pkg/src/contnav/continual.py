"""Continual-learning strategies over a stream of navigation tasks.

Every strategy wraps the two HGCBC levels (subgoal proposer and action policy)
independently. A :class:`StrategyState` is treated as a value: ``train_next``
returns a new state and never mutates arrays held by its input.
"""
from __future__ import annotations

import collections
import copy
import functools
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import nn
from .datasets import DEFAULT_K, DEFAULT_TAU, Dataset, TransitionIndex, sample_hier_batch
from .maze_sim import FAMILY_EXTENT
from .policies import (
    HierPolicy, Level, MLPNet, TrainConfig, fit, high_inputs, level_specs, low_inputs,
    net_loss, net_loss_value, nll_floor,
)

KINDS = ("SC1", "SCN", "FT1", "FTN", "FRZ", "RPL", "EWC", "L2", "PNN", "HiSPO")
LEVELS = ("high", "low")
HEADS = {"high": "subgoal", "low": "action"}
DEFAULT_HYPER = {
    "lam": 1.0,          # EWC / L2 strength
    "eps_h": 0.05,       # HiSPO acceptance thresholds
    "eps_l": 0.05,
    "lam_h": 0.1,        # HiSPO similarity weights
    "lam_l": 0.1,
    "M": 64,             # HiSPO simplex samples
    "val_fraction": 0.1,
    "val_samples": 2048,
    "fisher_samples": 2000,
    "fisher": "empirical",  # or "unit": F = 1, which turns EWC into L2
}


class StrategyError(RuntimeError):
    pass


@dataclass(frozen=True)
class StreamSpec:
    name: str
    tasks: tuple
    datasets: tuple = ()  # optional dataset file paths, one per task

    def __post_init__(self):
        from .maze_sim import get_maze

        if len(self.tasks) < 1:
            raise ValueError("a stream needs at least one task")
        for t in self.tasks:
            get_maze(t)
        if self.datasets and len(self.datasets) != len(self.tasks):
            raise ValueError("dataset references must match the task list")

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def family(self) -> str:
        from .maze_sim import get_maze

        fams = {get_maze(t).family for t in self.tasks}
        if len(fams) != 1:
            raise ValueError(f"stream {self.name} mixes maze families")
        return fams.pop()


def task_seed(seed: int, task_index: int) -> int:
    """Seed for the network initialization and batch stream of one task."""
    return int(np.random.SeedSequence([int(seed), int(task_index)]).generate_state(1)[0])


# -- simplex / diversity ------------------------------------------------------

def hispo_sample_alphas(n_anchors: int, M: int = 64, seed=0) -> np.ndarray:
    """M flat-Dirichlet draws plus the vertices and the barycenter, shape (M + n + 1, n)."""
    if n_anchors < 1 or M < 1:
        raise ValueError("n_anchors and M must be >= 1")
    rng = np.random.default_rng(seed)
    draws = rng.dirichlet(np.ones(n_anchors), size=M)
    return np.vstack([draws, np.eye(n_anchors), np.full((1, n_anchors), 1.0 / n_anchors)])


def _norms(anchors):
    norms = [float(np.linalg.norm(a)) for a in anchors]
    if min(norms) == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm anchor")
    return norms


def cosine_diversity(anchors: Sequence[np.ndarray]) -> float:
    """Mean cosine similarity over unordered anchor pairs."""
    if len(anchors) < 2:
        raise ValueError("cosine_diversity needs at least two anchors")
    norms = _norms(anchors)
    vals = [float(anchors[i] @ anchors[j]) / (norms[i] * norms[j])
            for i in range(len(anchors)) for j in range(i + 1, len(anchors))]
    return float(np.mean(vals))


def cosine_diversity_grad(anchors: Sequence[np.ndarray], index: int) -> np.ndarray:
    """Gradient of :func:`cosine_diversity` with respect to ``anchors[index]``."""
    n = len(anchors)
    norms = _norms(anchors)
    a, na = anchors[index], norms[index]
    g = np.zeros_like(a)
    for j in range(n):
        if j == index:
            continue
        b, nb = anchors[j], norms[j]
        dot = float(a @ b)
        g += b / (na * nb) - dot * a / (na ** 3 * nb)
    return g / (n * (n - 1) / 2)


def mix(anchors: Sequence[np.ndarray], alpha) -> np.ndarray:
    """Convex combination sum_i alpha_i * anchor_i over the leading anchors."""
    alpha = np.asarray(alpha, dtype=np.float64)
    out = alpha[0] * anchors[0]
    for a, th in zip(alpha[1:], anchors[1:len(alpha)]):
        out = out + a * th
    return out


# -- Fisher -------------------------------------------------------------------

def empirical_fisher(grad_fn, n_samples: int) -> np.ndarray:
    """Mean of squared per-sample gradients ``grad_fn(i)`` for i < n_samples."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    acc = None
    for i in range(n_samples):
        g = np.asarray(grad_fn(i), dtype=np.float64)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for sample {i}")
        acc = g * g if acc is None else acc + g * g
    return acc / n_samples


def _level_fisher(net, params, x, target, head) -> np.ndarray:
    return empirical_fisher(lambda i: net_loss(net, params, x[i:i + 1], target[i:i + 1], head)[1], len(x))


def estimate_fisher_diag(model, dataset, n_samples: int = 2000, seed: int = 0, config: Optional[TrainConfig] = None):
    """Diagonal empirical Fisher of an HGCBC model's own NLL, one array per level."""
    cfg = config or TrainConfig()
    fam = "AmazeVille" if model.goal_scale[0] > FAMILY_EXTENT["SimpleTown"] else "SimpleTown"
    rng = np.random.default_rng([int(seed), 3])
    batch = sample_hier_batch(_index(dataset), n_samples, cfg.k or model.k, cfg.tau or DEFAULT_TAU[fam],
                              cfg.her_fraction, rng)
    out = {}
    for lv, net, params, inputs in (
        ("high", model.high_net, model.high_params, high_inputs(model.goal_scale)),
        ("low", model.low_net, model.low_params, low_inputs(model.goal_scale)),
    ):
        x, target = inputs(batch)
        out[lv] = _level_fisher(net, params, x, target, HEADS[lv])
    return out


def _index(data) -> TransitionIndex:
    if isinstance(data, TransitionIndex):
        return data
    if isinstance(data, Dataset):
        return TransitionIndex(data.episodes)
    return TransitionIndex.from_datasets(data)


# -- PNN ----------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def pnn_layout(spec: nn.MLPSpec, column: int) -> nn.Layout:
    """Column parameters: the MLP tensors plus one H x H lateral per (block, earlier column)."""
    shapes = [(name, shape) for name, _, shape in nn.mlp_layout(spec).entries]
    H = spec.hidden_width
    for i in range(spec.n_hidden_blocks):
        for j in range(column):
            shapes.append((f"lat{i}.{j}", (H, H)))
    return nn.Layout.build(shapes)


def pnn_init(spec: nn.MLPSpec, column: int, seed) -> np.ndarray:
    layout = pnn_layout(spec, column)
    flat = np.zeros(layout.size)
    base = nn.init_params(spec, seed).data
    flat[:base.size] = base
    if column:
        rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 7])
        H = spec.hidden_width
        v = layout.views(flat)
        std = math.sqrt(nn.INIT_SCALE / (H * column))
        for i in range(spec.n_hidden_blocks):
            for j in range(column):
                v[f"lat{i}.{j}"][...] = nn.truncated_normal(rng, std, (H, H))
    return flat


def _lateral_inputs(spec: nn.MLPSpec, column: int, params, acts):
    """Per-block sum of lateral projections of earlier columns' post-LayerNorm activations."""
    if not column:
        return None
    v = pnn_layout(spec, column).views(params)
    return [sum(acts[j][i] @ v[f"lat{i}.{j}"] for j in range(column)) for i in range(spec.n_hidden_blocks)]


def pnn_column_acts(spec: nn.MLPSpec, columns: Sequence[np.ndarray], x):
    """Post-LayerNorm activations of each given column, per block."""
    n_base = nn.param_count(spec)
    acts = []
    for c, params in enumerate(columns):
        _, tape = nn.forward(spec, params[:n_base], x, _lateral_inputs(spec, c, params, acts))
        acts.append(tape.post_norm)
    return acts


class PNNNet:
    """Newest column of a progressive network; earlier columns are frozen inputs."""

    def __init__(self, spec: nn.MLPSpec, frozen: Sequence[np.ndarray]):
        self.spec = spec
        self.frozen = list(frozen)
        self.column = len(self.frozen)
        self.layout = pnn_layout(spec, self.column)
        self.n_base = nn.param_count(spec)
        self.n_params = self.layout.size

    def init(self, seed) -> np.ndarray:
        return pnn_init(self.spec, self.column, seed)

    def forward(self, params, x):
        acts = pnn_column_acts(self.spec, self.frozen, x)
        lat = _lateral_inputs(self.spec, self.column, params, acts)
        out, tape = nn.forward(self.spec, params[:self.n_base], x, lat)
        return out, (tape, acts)

    def backward(self, params, tape_acts, gout):
        tape, acts = tape_acts
        g_base, gz = nn.backward(self.spec, params[:self.n_base], tape, gout, return_lateral_grads=True)
        grad = np.zeros(self.n_params)
        grad[:self.n_base] = g_base
        g = self.layout.views(grad)
        for i in range(self.spec.n_hidden_blocks):
            for j in range(len(acts)):
                g[f"lat{i}.{j}"] += acts[j][i].T @ gz[i]
        return grad

    def predict(self, params, x):
        return self.forward(params, x)[0]


def pnn_column_output(spec: nn.MLPSpec, columns: Sequence[np.ndarray], c: int, x) -> np.ndarray:
    """Output of column ``c`` given all columns up to it."""
    return PNNNet(spec, columns[:c]).predict(columns[c], x)


# -- state --------------------------------------------------------------------

@dataclass
class StrategyState:
    kind: str
    family: str = "SimpleTown"
    seed: int = 0
    scale: str = "desk"
    width: Optional[int] = None
    n_blocks: Optional[int] = None
    hyper: dict = field(default_factory=dict)
    tasks_seen: int = 0
    current: Dict[str, np.ndarray] = field(default_factory=dict)
    snapshots: List[Dict[str, np.ndarray]] = field(default_factory=list)
    anchor_params: Dict[str, np.ndarray] = field(default_factory=dict)
    fisher_diag: Dict[str, np.ndarray] = field(default_factory=dict)
    fisher_count: int = 0
    columns: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    anchors: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    retained_alphas: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    replay: List[Dataset] = field(default_factory=list)
    train_minutes: List[float] = field(default_factory=list)
    param_ledger: List[Dict[str, int]] = field(default_factory=list)
    hispo_log: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; valid: {', '.join(KINDS)}")
        unknown = set(self.hyper) - set(DEFAULT_HYPER)
        if unknown:
            raise ValueError(f"unknown hyperparameter(s) {', '.join(sorted(unknown))}")
        self.hyper = {**DEFAULT_HYPER, **self.hyper}
        if self.hyper["fisher"] not in ("empirical", "unit"):
            raise ValueError("hyper 'fisher' must be 'empirical' or 'unit'")

    @property
    def specs(self) -> Dict[str, nn.MLPSpec]:
        hs, ls = level_specs(self.scale, self.width, self.n_blocks)
        return {"high": hs, "low": ls}

    @property
    def k(self) -> int:
        return DEFAULT_K[self.family]

    @property
    def goal_scale(self):
        e = FAMILY_EXTENT[self.family]
        return (e, e)

    @property
    def reference_count(self) -> int:
        return sum(nn.param_count(s) for s in self.specs.values())

    @property
    def anchors_high(self):
        return self.anchors.get("high", [])

    @property
    def anchors_low(self):
        return self.anchors.get("low", [])


def new_state(kind: str, family: str = "SimpleTown", seed: int = 0, hyper: Optional[dict] = None,
              scale: str = "desk", width: Optional[int] = None, n_blocks: Optional[int] = None) -> StrategyState:
    return StrategyState(kind, family, int(seed), scale, width, n_blocks, dict(hyper or {}))


def _copy_state(state: StrategyState) -> StrategyState:
    # arrays are never written in place, so sharing them between states is safe
    new = copy.copy(state)
    new.current = dict(state.current)
    new.snapshots = list(state.snapshots)
    new.anchor_params = dict(state.anchor_params)
    new.fisher_diag = dict(state.fisher_diag)
    new.columns = {k: list(v) for k, v in state.columns.items()}
    new.anchors = {k: list(v) for k, v in state.anchors.items()}
    new.retained_alphas = {k: list(v) for k, v in state.retained_alphas.items()}
    new.replay = list(state.replay)
    new.train_minutes = list(state.train_minutes)
    new.param_ledger = list(state.param_ledger)
    new.hispo_log = list(state.hispo_log)
    return new


def _inputs(state):
    return {"high": high_inputs(state.goal_scale), "low": low_inputs(state.goal_scale)}


def _k_tau(state, cfg: TrainConfig):
    return cfg.k or state.k, cfg.tau or DEFAULT_TAU[state.family]


def _fit(state, nets, init, data, cfg, seed, penalties=None):
    inputs = _inputs(state)
    levels = [Level(lv, nets[lv], init[lv].copy(), HEADS[lv], inputs[lv], (penalties or {}).get(lv))
              for lv in LEVELS]
    k, tau = _k_tau(state, cfg)
    fit(levels, data, cfg, seed, k, tau)
    return {lv.name: lv.params for lv in levels}


_FRESH_CACHE: "collections.OrderedDict[tuple, tuple]" = collections.OrderedDict()
FRESH_CACHE_SIZE = 64


def dataset_fingerprint(dataset: Dataset) -> str:
    fp = getattr(dataset, "_fingerprint", None)
    if fp is None:
        h = hashlib.sha1(dataset.maze_name.encode())
        for e in dataset.episodes:
            for arr in (e.obs, e.actions, e.achieved, np.asarray(e.goal, dtype=np.float64)):
                h.update(np.ascontiguousarray(arr).tobytes())
        fp = h.hexdigest()
        dataset._fingerprint = fp
    return fp


def _fit_fresh(state, task_index, dataset, cfg, ts):
    """Train both levels from the task's fresh initialization.

    This computation is shared by many strategies (SC1/SCN every task, all
    kinds on task 0) and is deterministic, so results are memoized together
    with the wall-clock minutes the original training took. A hit returns
    those minutes; a miss returns 0 since the caller's clock saw the fit.
    """
    key = (tuple(tuple(sorted(sp.to_dict().items())) for sp in state.specs.values()),
           state.family, ts, dataset_fingerprint(dataset), tuple(sorted(cfg.to_dict().items())))
    hit = _FRESH_CACHE.get(key)
    if hit is not None:
        _FRESH_CACHE.move_to_end(key)
        return dict(hit[0]), hit[1]
    t0 = time.perf_counter()
    params = _fit(state, _mlp_nets(state), _fresh(state, task_index), dataset, cfg, ts)
    minutes = (time.perf_counter() - t0) / 60.0
    for p in params.values():
        p.setflags(write=False)
    _FRESH_CACHE[key] = (params, minutes)
    while len(_FRESH_CACHE) > FRESH_CACHE_SIZE:
        _FRESH_CACHE.popitem(last=False)
    # the caller's own clock already covers this fit
    return dict(params), 0.0


def _fresh(state, task_index):
    ts = task_seed(state.seed, task_index)
    return {lv: nn.init_params(spec, [ts, i]).data for i, (lv, spec) in enumerate(state.specs.items())}


def _mlp_nets(state):
    return {lv: MLPNet(spec) for lv, spec in state.specs.items()}


def _quadratic_penalty(lam, weight, center):
    def pen(theta):
        d = theta - center
        return 0.5 * lam * float(np.sum(weight * (d * d))), lam * weight * d
    return pen


def _ledger_counts(state) -> Dict[str, int]:
    P = state.reference_count
    kind = state.kind
    if kind in ("SCN", "FTN"):
        n = len(state.snapshots) * P
        return {"inference": n, "training": n}
    if kind == "EWC":
        return {"inference": P, "training": 3 * P}
    if kind == "L2":
        return {"inference": P, "training": 2 * P}
    if kind == "PNN":
        n = sum(c.size for cols in state.columns.values() for c in cols)
        return {"inference": n, "training": n}
    if kind == "HiSPO":
        n = sum(a.size for anc in state.anchors.values() for a in anc)
        return {"inference": n, "training": n}
    return {"inference": P, "training": P}


def _split(dataset: Dataset, fraction: float, seed):
    n = len(dataset.episodes)
    n_val = max(1, int(round(fraction * n)))
    if n_val >= n:
        raise StrategyError("dataset too small for a held-out split")
    perm = np.random.default_rng([int(seed), 4]).permutation(n)
    val = sorted(perm[:n_val].tolist())
    train = sorted(perm[n_val:].tolist())
    return [dataset.episodes[i] for i in train], [dataset.episodes[i] for i in val]


def _hispo_level(state, lv, task_index, train_idx, val_batch, cfg, seed, log):
    """One HiSPO level update; returns (anchors, alpha for this task)."""
    spec = state.specs[lv]
    net = MLPNet(spec)
    head = HEADS[lv]
    x_val, t_val = _inputs(state)[lv](val_batch)
    floor = nll_floor(head)
    eps = state.hyper["eps_h" if lv == "high" else "eps_l"]
    lam = state.hyper["lam_h" if lv == "high" else "lam_l"]
    M = state.hyper["M"]
    old = state.anchors[lv]

    def val_loss(theta):
        # shifted by the clamp floor so the statistic is nonnegative
        return max(0.0, net_loss_value(net, theta, x_val, t_val, head) - floor)

    alphas = hispo_sample_alphas(len(old), M, [seed, 5, task_index])
    losses = [val_loss(mix(old, a)) for a in alphas]
    b = int(np.argmin(losses))
    a_old, l_old = alphas[b], losses[b]

    def diversity(theta):
        anchors = old + [theta]
        return lam * cosine_diversity(anchors), lam * cosine_diversity_grad(anchors, len(old))

    lvl = Level(lv, net, mix(old, a_old).copy(), head, _inputs(state)[lv], diversity)
    k, tau = _k_tau(state, cfg)
    seed_lv = [task_seed(state.seed, task_index), LEVELS.index(lv)]
    fit([lvl], train_idx, cfg, int(np.random.SeedSequence(seed_lv).generate_state(1)[0]), k, tau)
    cand = lvl.params
    ext = old + [cand]
    alphas_new = hispo_sample_alphas(len(ext), M, [seed, 6, task_index])
    alphas_new = np.vstack([alphas_new, np.append(a_old, 0.0)])
    losses_new = [val_loss(mix(ext, a)) for a in alphas_new]
    bn = int(np.argmin(losses_new))
    a_new, l_new = alphas_new[bn], losses_new[bn]
    keep = l_new < (1.0 - eps) * l_old
    log[lv] = {"L_old": l_old, "L_new": l_new, "retained": bool(keep), "n_anchors_before": len(old)}
    if keep:
        return ext, a_new
    return list(old), a_old


def train_next(state: StrategyState, task_index: int, dataset: Dataset,
               config: Optional[TrainConfig] = None, seed: Optional[int] = None) -> StrategyState:
    """Consume one task; returns a new state with ledgers extended by one entry."""
    cfg = config or TrainConfig()
    if task_index != state.tasks_seen:
        raise StrategyError(f"expected task_index {state.tasks_seen}, got {task_index}")
    if not dataset.episodes or dataset.n_transitions == 0:
        raise StrategyError("dataset is empty")
    if seed is not None and int(seed) != state.seed:
        state = _copy_state(state)
        state.seed = int(seed)
    s = _copy_state(state)
    ts = task_seed(s.seed, task_index)
    kind = s.kind
    t0 = time.perf_counter()
    trained = True
    cached_minutes = 0.0
    if kind in ("SC1", "SCN") or task_index == 0:
        params, cached_minutes = _fit_fresh(s, task_index, dataset, cfg, ts)
        s.current = params
        if kind == "SCN" or kind == "FTN":
            s.snapshots.append(params)
        if kind == "RPL":
            s.replay.append(dataset)
    elif kind == "FRZ":
        trained = False
    elif kind in ("FT1", "FTN"):
        s.current = _fit(s, _mlp_nets(s), s.current, dataset, cfg, ts)
        if kind == "FTN":
            s.snapshots.append(s.current)
    elif kind == "RPL":
        s.replay.append(dataset)
        s.current = _fit(s, _mlp_nets(s), s.current, TransitionIndex.from_datasets(s.replay), cfg, ts)
    elif kind in ("EWC", "L2"):
        lam = s.hyper["lam"]
        pens = {}
        for lv in LEVELS:
            w = s.fisher_diag[lv] if kind == "EWC" else np.ones_like(s.anchor_params[lv])
            pens[lv] = _quadratic_penalty(lam, w, s.anchor_params[lv])
        s.current = _fit(s, _mlp_nets(s), s.current, dataset, cfg, ts, pens)
    if kind == "PNN" and task_index == 0:
        for lv in LEVELS:
            s.columns[lv] = [s.current.pop(lv)]
    elif kind == "HiSPO" and task_index == 0:
        for lv in LEVELS:
            s.anchors[lv] = [s.current.pop(lv)]
            s.retained_alphas[lv] = [np.ones(1)]
        s.hispo_log.append({lv: {"retained": True, "n_anchors_before": 0} for lv in LEVELS})
    elif kind == "PNN":
        nets, init = {}, {}
        for i, lv in enumerate(LEVELS):
            cols = s.columns.get(lv, [])
            nets[lv] = PNNNet(s.specs[lv], cols)
            init[lv] = nets[lv].init([ts, i])
        params = _fit(s, nets, init, dataset, cfg, ts)
        for lv in LEVELS:
            p = params[lv]
            p.setflags(write=False)
            s.columns.setdefault(lv, []).append(p)
    elif kind == "HiSPO":
        tr_eps, val_eps = _split(dataset, s.hyper["val_fraction"], ts)
        k, tau = _k_tau(s, cfg)
        val_batch = sample_hier_batch(TransitionIndex(val_eps), s.hyper["val_samples"], k, tau,
                                      cfg.her_fraction, np.random.default_rng([ts, 8]))
        tr_idx = TransitionIndex(tr_eps)
        log = {}
        for lv in LEVELS:
            anchors, alpha = _hispo_level(s, lv, task_index, tr_idx, val_batch, cfg, s.seed, log)
            s.anchors[lv] = anchors
            s.retained_alphas[lv].append(alpha)
        s.hispo_log.append(log)
    # regularizer bookkeeping after training
    if kind in ("EWC", "L2"):
        s.anchor_params = dict(s.current)
        if kind == "EWC":
            if s.hyper["fisher"] == "unit":
                f_new = {lv: np.ones_like(s.current[lv]) for lv in LEVELS}
            else:
                f_new = estimate_fisher_diag(policy_model(s), dataset, s.hyper["fisher_samples"], ts, cfg)
            n = s.fisher_count
            s.fisher_diag = {lv: f_new[lv] if n == 0 else (s.fisher_diag[lv] * n + f_new[lv]) / (n + 1)
                             for lv in LEVELS}
            s.fisher_count = n + 1
    elapsed = (time.perf_counter() - t0) / 60.0
    s.train_minutes.append(elapsed + cached_minutes if trained else 0.0)
    s.tasks_seen = task_index + 1
    s.param_ledger.append(_ledger_counts(s))
    return s


def policy_model(state: StrategyState):
    """The single running model of SC1/FT1/FRZ/RPL/EWC/L2 as an HGCBCModel."""
    from .policies import HGCBCModel

    sp = state.specs
    return HGCBCModel(sp["high"], state.current["high"], sp["low"], state.current["low"],
                      state.k, state.k, state.goal_scale)


def level_params_for_task(state: StrategyState, j: int, i: Optional[int] = None) -> Dict[str, object]:
    """Per-level parameters used to act on task j after i tasks (defaults to all seen)."""
    i = state.tasks_seen if i is None else i
    if state.tasks_seen == 0 or i < 1:
        raise StrategyError("no tasks trained yet")
    if i > state.tasks_seen:
        raise StrategyError(f"only {state.tasks_seen} tasks consumed, asked for position {i}")
    kind = state.kind
    c = min(j, i - 1)
    if kind in ("SCN", "FTN"):
        return dict(state.snapshots[c])
    if kind == "PNN":
        return {lv: state.columns[lv][:c + 1] for lv in LEVELS}
    if kind == "HiSPO":
        return {lv: mix(state.anchors[lv], state.retained_alphas[lv][c]) for lv in LEVELS}
    return dict(state.current)


def policy_for_task(state: StrategyState, j: int, i: Optional[int] = None) -> HierPolicy:
    """Evaluable policy for task j at stream position i (tasks consumed)."""
    params = level_params_for_task(state, j, i)
    specs = state.specs
    fns = {}
    for lv in LEVELS:
        if state.kind == "PNN":
            cols = params[lv]
            net = PNNNet(specs[lv], cols[:-1])
            p = cols[-1]
        else:
            net, p = MLPNet(specs[lv]), params[lv]
        fns[lv] = (lambda n, q: (lambda x: n.predict(q, x)))(net, p)
    return HierPolicy(fns["high"], fns["low"], state.goal_scale, state.k)


def random_policy(family: str, seed: int, scale: str = "desk", width=None, n_blocks=None) -> HierPolicy:
    """Untrained network of the benchmark architecture (the FWT baseline)."""
    from .policies import make_hgcbc, policy_from_model

    return policy_from_model(make_hgcbc(family, seed=seed, scale=scale, width=width, n_blocks=n_blocks))


# -- checkpoints --------------------------------------------------------------

def _write_array(d: Path, name: str, arr: np.ndarray, index: dict) -> None:
    fname = name.replace("/", "_") + ".f8"
    (d / fname).write_bytes(np.asarray(arr, dtype="<f8").tobytes())
    index[name] = {"file": fname, "shape": list(np.shape(arr))}


def save_strategy(state: StrategyState, directory) -> None:
    """One subdirectory per task with its parameter arrays plus a JSON index; ledgers in state.json."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for j in range(state.tasks_seen):
        d = root / f"task_{j}"
        d.mkdir(exist_ok=True)
        index = {}
        for lv in LEVELS:
            if state.kind in ("SCN", "FTN"):
                _write_array(d, f"snapshot/{lv}", state.snapshots[j][lv], index)
            if state.kind == "PNN":
                _write_array(d, f"column/{lv}", state.columns[lv][j], index)
            if state.kind == "HiSPO":
                _write_array(d, f"alpha/{lv}", state.retained_alphas[lv][j], index)
        (d / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    d = root / "final"
    d.mkdir(exist_ok=True)
    index = {}
    for lv in LEVELS:
        if lv in state.current:
            _write_array(d, f"current/{lv}", state.current[lv], index)
        if lv in state.anchor_params:
            _write_array(d, f"anchor/{lv}", state.anchor_params[lv], index)
        if lv in state.fisher_diag:
            _write_array(d, f"fisher/{lv}", state.fisher_diag[lv], index)
        for a, arr in enumerate(state.anchors.get(lv, [])):
            _write_array(d, f"hispo_anchor/{lv}/{a}", arr, index)
    (d / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    meta = {
        "kind": state.kind, "family": state.family, "seed": state.seed, "scale": state.scale,
        "width": state.width, "n_blocks": state.n_blocks, "hyper": state.hyper,
        "tasks_seen": state.tasks_seen, "fisher_count": state.fisher_count,
        "train_minutes": state.train_minutes, "param_ledger": state.param_ledger,
        "hispo_log": state.hispo_log, "replay_mazes": [d.maze_name for d in state.replay],
    }
    (root / "state.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _read_arrays(d: Path) -> Dict[str, np.ndarray]:
    index = json.loads((d / "index.json").read_text())
    return {name: np.frombuffer((d / e["file"]).read_bytes(), dtype="<f8").astype(np.float64).reshape(e["shape"])
            for name, e in index.items()}


def load_strategy(directory) -> StrategyState:
    """Inverse of :func:`save_strategy` (the RPL replay buffer is not restored)."""
    root = Path(directory)
    meta = json.loads((root / "state.json").read_text())
    s = StrategyState(meta["kind"], meta["family"], meta["seed"], meta["scale"], meta["width"],
                      meta["n_blocks"], meta["hyper"], meta["tasks_seen"])
    s.fisher_count = meta["fisher_count"]
    s.train_minutes = list(meta["train_minutes"])
    s.param_ledger = list(meta["param_ledger"])
    s.hispo_log = list(meta["hispo_log"])
    for j in range(s.tasks_seen):
        arr = _read_arrays(root / f"task_{j}")
        if s.kind in ("SCN", "FTN"):
            s.snapshots.append({lv: arr[f"snapshot/{lv}"] for lv in LEVELS})
        for lv in LEVELS:
            if s.kind == "PNN":
                s.columns.setdefault(lv, []).append(arr[f"column/{lv}"])
            if s.kind == "HiSPO":
                s.retained_alphas.setdefault(lv, []).append(arr[f"alpha/{lv}"])
    arr = _read_arrays(root / "final")
    for lv in LEVELS:
        if f"current/{lv}" in arr:
            s.current[lv] = arr[f"current/{lv}"]
        if f"anchor/{lv}" in arr:
            s.anchor_params[lv] = arr[f"anchor/{lv}"]
        if f"fisher/{lv}" in arr:
            s.fisher_diag[lv] = arr[f"fisher/{lv}"]
        n = sum(1 for name in arr if name.startswith(f"hispo_anchor/{lv}/"))
        if n:
            s.anchors[lv] = [arr[f"hispo_anchor/{lv}/{a}"] for a in range(n)]
    return s
