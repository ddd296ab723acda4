"""Goal-conditioned behavioral cloning policies: flat (GCBC) and hierarchical (HGCBC)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .datasets import DEFAULT_K, DEFAULT_TAU, Dataset, HierBatch, TransitionIndex, sample_hier_batch
from .maze_sim import FAMILY_EXTENT, OBS_DIM, Action

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
N_BOOL = 5
ACTION_OUT = N_BOOL + 2
SUBGOAL_OUT = 4
COND_DIM = OBS_DIM + 5
BEARING_RANGE = 10.0
NET_SCALES = {"desk": (64, 3), "paper": (256, 3)}


class NonFiniteLossError(FloatingPointError):
    pass


def _check_finite(per_sample: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NonFiniteLossError(f"non-finite {what} at batch index {bad[0]}")


# -- distribution heads -------------------------------------------------------

def gaussian_nll(mu, raw_log_std, target):
    """Elementwise NLL with clamped log-std; returns (nll, d/dmu, d/draw_log_std)."""
    ls = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    inv_var = np.exp(-2.0 * ls)
    d = target - mu
    sq = d * d * inv_var
    nll = 0.5 * sq + ls + HALF_LOG_2PI
    inside = (raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX)
    return nll, -d * inv_var, (1.0 - sq) * inside


def subgoal_nll(out: np.ndarray, target: np.ndarray):
    """Mean 2D diagonal-Gaussian NLL; returns (loss, d loss / d out, per-sample nll)."""
    nll, g_mu, g_ls = gaussian_nll(out[:, :2], out[:, 2:4], target)
    per = nll.sum(axis=1)
    _check_finite(per, "subgoal likelihood")
    n = len(out)
    return float(per.mean()), np.concatenate([g_mu, g_ls], axis=1) / n, per


def action_nll(out: np.ndarray, action: np.ndarray):
    """Mean NLL of (5 Bernoulli bools, Gaussian turn).

    Returns (loss, d loss / d out, per-sample nll, (bernoulli part, gaussian part)).
    """
    z = out[:, :N_BOOL]
    y = action[:, :N_BOOL]
    bern = np.logaddexp(0.0, z) - y * z
    g_z = 0.5 * (1.0 + np.tanh(0.5 * z)) - y
    nll, g_mu, g_ls = gaussian_nll(out[:, N_BOOL], out[:, N_BOOL + 1], action[:, N_BOOL])
    per_b = bern.sum(axis=1)
    per = per_b + nll
    _check_finite(per, "action likelihood")
    n = len(out)
    gout = np.concatenate([g_z, g_mu[:, None], g_ls[:, None]], axis=1) / n
    return float(per.mean()), gout, per, (float(per_b.mean()), float(nll.mean()))


def nll_floor(head: str) -> float:
    """Infimum of the per-sample NLL implied by the log-std clamp."""
    dims = 2 if head == "subgoal" else 1
    return dims * (LOG_STD_MIN + HALF_LOG_2PI)


def decode_actions(out: np.ndarray) -> np.ndarray:
    """Deterministic decoding: bools are logit > 0, turn is the clamped mean."""
    a = np.empty((len(out), 6))
    a[:, :N_BOOL] = out[:, :N_BOOL] > 0.0
    a[:, N_BOOL] = np.clip(out[:, N_BOOL], -1.0, 1.0)
    return a


# -- networks -----------------------------------------------------------------

class MLPNet:
    """Plain residual MLP over a flat parameter vector."""

    def __init__(self, spec: nn.MLPSpec):
        self.spec = spec
        self.n_params = nn.param_count(spec)

    def init(self, seed) -> np.ndarray:
        return nn.init_params(self.spec, seed).data

    def forward(self, params, x):
        return nn.forward(self.spec, params, x)

    def backward(self, params, tape, gout):
        return nn.backward(self.spec, params, tape, gout)

    def predict(self, params, x):
        return nn.forward(self.spec, params, x)[0]


def condition(obs: np.ndarray, point: np.ndarray, scale) -> np.ndarray:
    """Network input for a goal-space point (absolute meters).

    Observation, the point divided by the extent, then the point as seen from
    the agent: cos and sin of its bearing relative to the heading and its
    distance (capped at the ray range, divided by it). The bearing terms are
    pure functions of (obs, point) that the networks would otherwise have to
    discover from small differences of absolute coordinates.
    """
    s = np.asarray(scale, dtype=np.float64)
    p = np.asarray(point, dtype=np.float64) / s
    d = (p - obs[:, :2]) * s
    c, sn = obs[:, 2], obs[:, 3]
    lx = d[:, 0] * c + d[:, 1] * sn
    ly = d[:, 1] * c - d[:, 0] * sn
    r = np.hypot(lx, ly)
    far = r > 1e-9
    safe = np.where(far, r, 1.0)
    x = np.empty((len(obs), COND_DIM))
    x[:, :OBS_DIM] = obs
    x[:, OBS_DIM:OBS_DIM + 2] = p
    x[:, OBS_DIM + 2] = np.where(far, lx / safe, 1.0)
    x[:, OBS_DIM + 3] = np.where(far, ly / safe, 0.0)
    x[:, OBS_DIM + 4] = np.minimum(r, BEARING_RANGE) / BEARING_RANGE
    return x


def net_loss(net, params, x, target, head: str):
    """Mean NLL and its parameter gradient for one network."""
    out, tape = net.forward(params, x)
    if head == "subgoal":
        loss, gout, _ = subgoal_nll(out, target)
    else:
        loss, gout, _, _ = action_nll(out, target)
    return loss, net.backward(params, tape, gout)


def net_loss_value(net, params, x, target, head: str) -> float:
    out = net.predict(params, x)
    return subgoal_nll(out, target)[0] if head == "subgoal" else action_nll(out, target)[0]


# -- models -------------------------------------------------------------------

@dataclass
class GCBCModel:
    spec: nn.MLPSpec
    params: np.ndarray
    goal_scale: Tuple[float, float] = (20.0, 20.0)
    k: int = 5  # only used for HER batch construction

    @property
    def net(self) -> MLPNet:
        return MLPNet(self.spec)


@dataclass
class HGCBCModel:
    high_spec: nn.MLPSpec
    high_params: np.ndarray
    low_spec: nn.MLPSpec
    low_params: np.ndarray
    k: int = 5
    replan_every: Optional[int] = None
    goal_scale: Tuple[float, float] = (20.0, 20.0)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.replan_every is None:
            self.replan_every = self.k
        if self.replan_every < 1:
            raise ValueError("replan_every must be >= 1")

    @property
    def high_net(self) -> MLPNet:
        return MLPNet(self.high_spec)

    @property
    def low_net(self) -> MLPNet:
        return MLPNet(self.low_spec)


def level_specs(scale: str = "desk", width: Optional[int] = None, n_blocks: Optional[int] = None):
    w, b = NET_SCALES[scale]
    w, b = width or w, b if n_blocks is None else n_blocks
    return nn.MLPSpec(COND_DIM, SUBGOAL_OUT, w, b), nn.MLPSpec(COND_DIM, ACTION_OUT, w, b)


def make_hgcbc(family: str = "SimpleTown", seed: int = 0, scale: str = "desk", width=None,
               n_blocks=None, k: Optional[int] = None, replan_every: Optional[int] = None) -> HGCBCModel:
    hs, ls = level_specs(scale, width, n_blocks)
    ext = FAMILY_EXTENT[family]
    return HGCBCModel(hs, nn.init_params(hs, [seed, 0]).data, ls, nn.init_params(ls, [seed, 1]).data,
                      k or DEFAULT_K[family], replan_every, (ext, ext))


def make_gcbc(family: str = "SimpleTown", seed: int = 0, scale: str = "desk", width=None,
              n_blocks=None, k: Optional[int] = None) -> GCBCModel:
    _, ls = level_specs(scale, width, n_blocks)
    ext = FAMILY_EXTENT[family]
    return GCBCModel(ls, nn.init_params(ls, [seed, 1]).data, (ext, ext), k or DEFAULT_K[family])


def _high_tuple(batch):
    return batch.high if isinstance(batch, HierBatch) else batch


def high_loss(model: HGCBCModel, high):
    """L^h: mean NLL of the k-step subgoal given (obs, goal)."""
    obs, goal, sub = _high_tuple(high)
    s = np.asarray(model.goal_scale)
    return net_loss(model.high_net, model.high_params, condition(obs, goal, s), sub / s, "subgoal")


def low_loss(model: HGCBCModel, low):
    """L^l: mean NLL of the expert action given (obs, subgoal)."""
    obs, sub, act = low.low if isinstance(low, HierBatch) else low
    return net_loss(model.low_net, model.low_params, condition(obs, sub, model.goal_scale), act, "action")


def flat_loss(model: GCBCModel, batch):
    """Action NLL conditioned on the (possibly relabeled) final goal."""
    if isinstance(batch, HierBatch):
        batch = (batch.obs, batch.goal, batch.action)
    obs, goal, act = batch
    return net_loss(model.net, model.params, condition(obs, goal, model.goal_scale), act, "action")


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    lr: float = 3e-4
    k: Optional[int] = None
    tau: Optional[float] = None
    her_fraction: float = 0.5
    trace_every: int = 100

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Level:
    """One trainable network inside the joint loop.

    ``inputs(batch)`` returns (x, target); ``penalty(params)`` optionally
    returns (value, gradient) added to the NLL.
    """

    name: str
    net: object
    params: np.ndarray
    head: str
    inputs: Callable
    penalty: Optional[Callable] = None
    trace: List[float] = field(default_factory=list)


def high_inputs(scale):
    s = np.asarray(scale)
    return lambda b: (condition(b.obs, b.goal, s), b.high_subgoal / s)


def low_inputs(scale):
    return lambda b: (condition(b.obs, b.low_subgoal, scale), b.action)


def flat_inputs(scale):
    return lambda b: (condition(b.obs, b.goal, scale), b.action)


def fit(levels: Sequence[Level], data, cfg: TrainConfig, seed, k: int, tau: float) -> List[Level]:
    """Joint loop: each step draws one HierBatch and takes one Adam step per level.

    Every level keeps its own Adam state. Raises NonFiniteLossError with the step index.
    """
    index = data if isinstance(data, TransitionIndex) else TransitionIndex.from_datasets(
        [data] if isinstance(data, Dataset) else data)
    rng = np.random.default_rng([int(seed), 2])
    states = [nn.AdamState.zeros(len(lv.params), lr=cfg.lr) for lv in levels]
    running = [0.0] * len(levels)
    for t in range(cfg.steps):
        batch = sample_hier_batch(index, cfg.batch_size, k, tau, cfg.her_fraction, rng)
        for i, lv in enumerate(levels):
            x, target = lv.inputs(batch)
            try:
                loss, grad = net_loss(lv.net, lv.params, x, target, lv.head)
                if lv.penalty is not None:
                    pv, pg = lv.penalty(lv.params)
                    loss += pv
                    grad += pg
                if not math.isfinite(loss):
                    raise NonFiniteLossError(f"non-finite {lv.name} loss")
                lv.params, states[i] = nn.adam_step(lv.params, grad, states[i])
            except (NonFiniteLossError, nn.NonFiniteError) as e:
                raise NonFiniteLossError(f"training step {t}: {e}") from e
            running[i] += loss
        if (t + 1) % cfg.trace_every == 0:
            for i, lv in enumerate(levels):
                lv.trace.append(running[i] / cfg.trace_every)
                running[i] = 0.0
    return list(levels)


def _resolve(model, cfg: TrainConfig):
    fam = "AmazeVille" if model.goal_scale[0] > FAMILY_EXTENT["SimpleTown"] else "SimpleTown"
    return cfg.k or model.k, cfg.tau or DEFAULT_TAU[fam]


def train(model, dataset, steps: Optional[int] = None, seed: int = 0, config: Optional[TrainConfig] = None):
    """Train a GCBC or HGCBC model; returns (new model, loss trace dict)."""
    cfg = config or TrainConfig()
    if steps is not None:
        cfg = replace(cfg, steps=int(steps))
    if isinstance(dataset, Dataset) and not dataset.episodes:
        raise ValueError("cannot train on an empty dataset")
    k, tau = _resolve(model, cfg)
    if isinstance(model, HGCBCModel):
        levels = fit([
            Level("high", model.high_net, model.high_params.copy(), "subgoal", high_inputs(model.goal_scale)),
            Level("low", model.low_net, model.low_params.copy(), "action", low_inputs(model.goal_scale)),
        ], dataset, cfg, seed, k, tau)
        new = replace(model, high_params=levels[0].params, low_params=levels[1].params)
    elif isinstance(model, GCBCModel):
        levels = fit([Level("flat", model.net, model.params.copy(), "action", flat_inputs(model.goal_scale))],
                     dataset, cfg, seed, k, tau)
        new = replace(model, params=levels[0].params)
    else:
        raise TypeError(f"cannot train {type(model).__name__}")
    return new, {lv.name: lv.trace for lv in levels}


# -- acting -------------------------------------------------------------------

class HierPolicy:
    """Batched hierarchical controller; subgoals refresh every ``replan_every`` steps."""

    def __init__(self, high_fn, low_fn, goal_scale, replan_every: int):
        self.high_fn = high_fn
        self.low_fn = low_fn
        self.scale = np.asarray(goal_scale, dtype=np.float64)
        self.replan_every = int(replan_every)
        self._sub = None

    def reset(self, n: int) -> None:
        self._sub = np.zeros((n, 2))

    def act_batch(self, obs, goals, step_index: int, rows=None) -> np.ndarray:
        obs = np.atleast_2d(obs)
        goals = np.atleast_2d(goals)
        if self._sub is None or (rows is None and len(self._sub) != len(obs)):
            self.reset(len(obs))
        rows = np.arange(len(obs)) if rows is None else rows
        if step_index % self.replan_every == 0:
            out = self.high_fn(condition(obs, goals, self.scale))
            self._sub[rows] = out[:, :2]  # normalized goal-space mean
        return decode_actions(self.low_fn(condition(obs, self._sub[rows] * self.scale, self.scale)))


class FlatPolicy:
    def __init__(self, fn, goal_scale):
        self.fn = fn
        self.scale = np.asarray(goal_scale, dtype=np.float64)

    def reset(self, n: int) -> None:
        pass

    def act_batch(self, obs, goals, step_index: int, rows=None) -> np.ndarray:
        return decode_actions(self.fn(condition(np.atleast_2d(obs), np.atleast_2d(goals), self.scale)))


def policy_from_model(model):
    if isinstance(model, HGCBCModel):
        hn, ln_ = model.high_net, model.low_net
        hp, lp = model.high_params, model.low_params
        return HierPolicy(lambda x: hn.predict(hp, x), lambda x: ln_.predict(lp, x),
                          model.goal_scale, model.replan_every)
    if isinstance(model, GCBCModel):
        net, p = model.net, model.params
        return FlatPolicy(lambda x: net.predict(p, x), model.goal_scale)
    raise TypeError(f"no policy for {type(model).__name__}")


def act(model, obs, goal, step_index: int, memory: Optional[dict] = None) -> Action:
    """Single-agent decision. Hierarchical models keep the current subgoal in ``memory``."""
    obs = np.asarray(obs, dtype=np.float64)[None]
    goal = np.asarray(goal, dtype=np.float64)[None]
    if isinstance(model, HGCBCModel):
        memory = {} if memory is None else memory
        s = np.asarray(model.goal_scale)
        if step_index % model.replan_every == 0 or "subgoal" not in memory:
            memory["subgoal"] = model.high_net.predict(model.high_params, condition(obs, goal, s))[:, :2]
        out = model.low_net.predict(model.low_params, condition(obs, memory["subgoal"] * s, s))
    else:
        out = model.net.predict(model.params, condition(obs, goal, model.goal_scale))
    return Action.from_array(decode_actions(out)[0])


# -- checkpoints --------------------------------------------------------------

def save_model(model, directory) -> None:
    """Parameter files per net plus a JSON sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    side = {"log_std_clamp": [LOG_STD_MIN, LOG_STD_MAX], "goal_scale": list(model.goal_scale), "k": model.k}
    if isinstance(model, HGCBCModel):
        nets = {"high": (model.high_spec, model.high_params), "low": (model.low_spec, model.low_params)}
        side.update(kind="HGCBC", replan_every=model.replan_every)
    else:
        nets = {"flat": (model.spec, model.params)}
        side.update(kind="GCBC")
    side["specs"] = {}
    for name, (spec, params) in nets.items():
        nn.save_params(d / f"{name}.cnpv", nn.ParamVector(params, nn.mlp_layout(spec)), {"spec": spec.to_dict()})
        side["specs"][name] = spec.to_dict()
    (d / "model.json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")


def load_model(directory):
    d = Path(directory)
    side = json.loads((d / "model.json").read_text())
    specs = {k: nn.MLPSpec.from_dict(v) for k, v in side["specs"].items()}
    params = {k: nn.load_params(d / f"{k}.cnpv")[0].data for k in specs}
    scale = tuple(side["goal_scale"])
    if side["kind"] == "HGCBC":
        return HGCBCModel(specs["high"], params["high"], specs["low"], params["low"],
                          side["k"], side["replan_every"], scale)
    return GCBCModel(specs["flat"], params["flat"], scale, side["k"])
