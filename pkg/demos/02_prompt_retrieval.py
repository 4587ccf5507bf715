"""Key-query retrieval and one local prompt-tuning epoch.

A client retrieves kappa prompts per pool for every sample, then trains the
selected prompt tokens, their keys (through the retrieval regularizer) and
the head.  Prompts no sample picked are left exactly as they were.
"""
import numpy as np

from mmfedprompt.client import ClientState, encode, local_update, select
from mmfedprompt.promptpool import PromptPool, distances, regularizer
from mmfedprompt.synthdata import ScenarioSpec, build_benchmark
from mmfedprompt.vlbackbone import BackboneParams, HeadParams

rng = np.random.default_rng(0)
bm = build_benchmark(ScenarioSpec(n_clients=4, seed=0), n_train=800, n_test=100)
backbone = BackboneParams.init(seed=0)
data = encode(bm.clients[0].samples, backbone)

pools = {"inter": PromptPool.init(20, 1, 32, 16, "inter", rng), "intra": PromptPool.init(20, 1, 32, 16, "intra", rng)}
client = ClientState(0, HeadParams.init(), pools, {"inter": 5, "intra": 5})

sel = select(client, data)
d = distances(data.queries[0], pools["intra"].keys)
print("sample 0 picks intra prompts", sel["intra"][0].tolist())
print("  their distances", np.round(d[sel["intra"][0]], 3).tolist())
print("  next best      ", np.round(np.sort(d)[5:8], 3).tolist())
r = regularizer(data.queries[:1], [pools[n].keys[sel[n][:1]] for n in pools])
print(f"  regularizer {r.data[0]:.3f} over 10 keys")

before = {n: p.tokens.copy() for n, p in pools.items()}
client.local_epochs = 3
*_, stats = local_update(client, data, backbone, rng)
print()
print("epoch losses", [round(x, 4) for x in stats.epoch_losses])
for n, p in client.pools.items():
    moved = np.any(p.tokens != before[n], axis=(1, 2))
    print(f"{n}: {stats.selected[n].sum()} prompts used, {moved.sum()} changed, "
          f"unused and changed: {(moved & ~stats.selected[n]).sum()}")
