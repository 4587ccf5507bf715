"""Server-side alignment of inter-client prompt pools.

Three clients send pools of 4 prompts; two of them share their pools.  The
server alternates gradient steps on the centroids, metric and popularity net
with one exact Hungarian assignment per client, then drops empty clusters.
The identical pools collapse onto the same centroids.
"""
import numpy as np

from mmfedprompt import alignserver as al
from mmfedprompt.oracles import enumerate_client_assignment
from mmfedprompt.promptpool import PromptPool

rng = np.random.default_rng(3)
shared = PromptPool.init(4, 1, 6, 4, "inter", rng, token_std=1.0)
other = PromptPool.init(4, 1, 6, 4, "inter", rng, token_std=1.0)
pools = [(0, shared.copy()), (1, shared.copy()), (2, other)]

for sign in ("as_written", "flipped"):
    params = al.ServerParams.init(10, seed=0)
    pool, rep = al.align(pools, params, al.AlignConfig(popularity_sign=sign))
    print(f"{sign}: objective {rep.objective_before:.3f} -> {rep.objective_after:.3f}, "
          f"{len(pool)} of 12 clusters kept, {rep.violations} monotonicity violations")
    print("  cluster of each prompt, per client:", rep.state.assign.tolist())
    alphas = [v for _, kind, v in rep.trace if kind.startswith("alpha")]
    print("  objective after each assignment step:", np.round(alphas[:6], 3).tolist(), "...")

# the assignment block is solved exactly: compare one client against enumeration
state = rep.state
cols, best, v = enumerate_client_assignment(al.pool_vectors(other), state.theta, state.params.gamma,
                                            state.params.zeta, "flipped")
print("enumerated optimum", round(best, 6), "solver", round(v[np.arange(4), state.assign[2]].sum(), 6))
