"""
Hierarchical vs flat goal-conditioned behavioral cloning
========================================================

Trains HGCBC (subgoal proposer + low-level policy) and flat GCBC on expert
data from one maze and compares success rates. Pass a maze name and a step
count to change the setting, e.g. ``python 02_hierarchical_bc.py A-HOOX 20000``.
"""
import sys
import time

from contnav.datasets import generate_dataset
from contnav.maze_sim import get_maze
from contnav.metrics import evaluate_success
from contnav.policies import TrainConfig, make_gcbc, make_hgcbc, policy_from_model, train

name = sys.argv[1] if len(sys.argv) > 1 else "S-BASE"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 5000

maze = get_maze(name)
every = max(1, steps // 5)
data = generate_dataset(maze, noise=0.05, seed=1)
print(f"{name}: {len(data.episodes)} expert episodes, {data.n_transitions} transitions")

for label, make in (("HGCBC", make_hgcbc), ("GCBC", make_gcbc)):
    t0 = time.time()
    model, trace = train(make(maze.family, seed=0), data, seed=0, config=TrainConfig(steps=steps, trace_every=every))
    rate = evaluate_success(policy_from_model(model), maze, n_episodes=100, eval_seed=1_000_000)
    losses = {k: [round(v, 2) for v in vals] for k, vals in trace.items() if vals}
    print(f"\n{label}: {steps} steps in {time.time() - t0:.0f}s, success {rate:.2f}")
    print(f"  mean loss per {every} steps:", losses)
