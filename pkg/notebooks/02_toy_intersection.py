# %% [markdown]
# # Intention steering on the three-exit intersection
# Trains a small model on the toy intersection, then forces each intention in
# turn and checks which exit the first agent ends up nearest to. Training
# takes several minutes on one CPU core.

# %%
import pathlib

from niva.experiments import intention_routing, train_toy_intersection
from niva.plot import render_svg
from niva.rollout import rollout_scenario
from niva.config import RolloutConfig
from niva.scenario import generate_toy_dataset


def progress(step, row, estep):
    if step % 100 == 0:
        print(step, {k: float(f"{v:.4g}") for k, v in row.items() if isinstance(v, float)})


result = train_toy_intersection(callback=progress)

# %%
test_set = generate_toy_dataset("intersection-3exit", 4, seed=101)
sampled = intention_routing(result.model, test_set)
mean_only = intention_routing(result.model, test_set, noise=0.0)
print("purity with sampled noise:", round(sampled.purity, 3), sampled.mapping)
print("purity on the mean path:  ", round(mean_only.purity, 3), mean_only.mapping)

# %% [markdown]
# One rollout per intention for the first held-out scene, drawn over the map.

# %%
scene = test_set[0]
rollouts = [rollout_scenario(result.model, scene, RolloutConfig(horizon=60), 0, intentions=z).to_scenario(scene)
            for z in range(result.model.cfg.num_intentions)]
out = pathlib.Path("intersection_rollouts.svg")
out.write_text(render_svg(scene, rollouts))
print("wrote", out.resolve())
