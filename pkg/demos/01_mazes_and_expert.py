"""
Mazes, the simulator and the scripted expert
============================================

Walks through one SimpleTown and one AmazeVille maze: reset, a few manual
steps, an expert rollout and a small dataset with hindsight batches.
"""
import numpy as np

from contnav.datasets import generate_dataset, plan_path, rollout_expert, sample_hier_batch
from contnav.maze_sim import Action, SimConfig, builtin_mazes, get_maze, reset, step

cfg = SimConfig()
print("built-in mazes:", ", ".join(m.name for m in builtin_mazes()))

# S-BASE: open town, start and goal on opposite sides
maze = get_maze("S-BASE")
state, goal = reset(maze, cfg, seed=0)
print(f"\n{maze.name}: start {np.round(state.position, 2)}, goal {np.round(goal, 2)}")

# drive forward for one second while turning left
for _ in range(10):
    state, obs, reward, done = step(maze, cfg, state, Action(move_forward=True, turn=0.5), goal)
print("after 1 s forward+turn:", np.round(state.position, 2), "heading", round(state.heading, 2))
print("observation (13 floats):", np.round(obs, 3))

# the expert follows an A* path over a 0.5 m grid
path = plan_path(maze, state.position, goal)
print(f"A* path with {len(path)} waypoints")
ep = rollout_expert(maze, cfg, seed=0, noise=0.0)
print(f"expert episode: {len(ep)} steps, success={ep.success}")

# A-L mazes have low blocks that can only be crossed by jumping
maze = get_maze("A-LOOX")
for seed in range(20):
    ep = rollout_expert(maze, cfg, seed=seed, noise=0.0)
    jumps = int(ep.actions[:, 4].sum())
    if jumps:
        break
print(f"\n{maze.name} seed {seed}: expert episode {len(ep)} steps, success={ep.success}, jump presses={jumps}")

# a small noisy dataset and one hierarchical batch
data = generate_dataset(get_maze("S-BASE"), 20, noise=0.05, seed=1)
print(f"\ndataset: {len(data.episodes)} episodes, {data.n_transitions} transitions, "
      f"success {data.success_rate:.2f}")
b = sample_hier_batch(data, 8, k=5, tau=15.0, her_fraction=0.5, rng=np.random.default_rng(0))
print("relabeled rows:", b.relabeled.astype(int))
print("goal vs high-level subgoal (first 3 rows):")
for g, sg in zip(b.goal[:3], b.high_subgoal[:3]):
    print("  ", np.round(g, 2), "->", np.round(sg, 2))
