# %% [markdown]
# # Gaussian algebra, gradients and the held-decision bound
# Runs the numerical cross-checks that back the closed-form pieces of the
# simulator. Everything here finishes in well under a minute.

# %%
from niva import oracles
from niva.rollout import AsyncBoundCase, async_bound_check

for result in oracles.run_all():
    print(result.line())

# %% [markdown]
# Held-decision divergence: an agent that keeps acting on a stale control for
# part of each patch drifts from the synchronous one. The gap shrinks with the
# patch length and stays under the analytic bound.

# %%
case = AsyncBoundCase(lipschitz_k=1.0, action_gap_m=0.5, dynamics="linear")
for row in async_bound_check(case, [1.0, 0.5, 0.25, 0.1, 0.05]):
    print(f"tau={row.tau:<5} gap={row.empirical_gap:.5f} bound={row.analytic_bound:.5f} holds={row.holds}")

# %% [markdown]
# Finite-difference check of every differentiable primitive (fewer seeds than
# the acceptance suite to keep this quick).

# %%
from niva.gradcheck import check_primitives, end_to_end_check

for r in check_primitives(seeds=5):
    print(f"{r.name:<20} {r.max_rel_err:.2e} ok={r.ok}")
print(end_to_end_check())
