"""
Cluster bounds, hierarchical selection and cross-layer reuse
============================================================

A cluster's coordinate-wise max and min bound every key inside it, so one
dot product against a blended summary scores the whole cluster.  Adjacent
layers tend to pick similar clusters, which is what makes reusing a
selection across a pair of layers cheap.
"""

import numpy as np

from mpcache.attention import ModelSpec, decode_step, synthetic_state
from mpcache.eviction import (
    EvictionConfig,
    commonality_score,
    sim_exact_max,
    sim_linear,
    sim_upper_bound,
    summarize_cluster,
)
from mpcache.rss import PartyNet

rng = np.random.default_rng(0)

# %%
# The bound and its linear stand-in on one 16-token cluster.
Kc, q = rng.normal(size=(16, 8)), rng.normal(size=8)
summary = summarize_cluster(Kc)
print("exact max:", round(sim_exact_max(q, Kc), 3), " upper bound:", round(sim_upper_bound(q, summary), 3))
for alpha in (0.0, 0.6, 1.0):
    print(f"linear score, alpha={alpha}:", round(sim_linear(q, summary, alpha), 3))

# %%
# Six layers decoding over a 512-token cache.  With sharing disabled every
# layer selects on its own; the commonality score measures the overlap.
spec = ModelSpec.random(L=6, H=2, d=16, seed=0)
cfg = EvictionConfig.preset("xsum", 0.2, share_group=1)
state = synthetic_state(spec, 512, cfg, seed=0)
_, _, info = decode_step(rng.normal(size=spec.D), state, spec, cfg)
per_layer = [sel.indices[0] for sel in info.selections]
for m in (1, 2, 3):
    print(f"commonality over {m + 1} adjacent layers:", round(commonality_score(per_layer, m), 3))

# %%
# With the default pairing, layers 3 and 5 reuse their neighbour's choice
# and the selection ledger for those layers stays empty.
cfg = EvictionConfig.preset("xsum", 0.2)
net = PartyNet(seed=0)
state = synthetic_state(spec, 512, cfg, "secure", net, seed=0)
_, _, info = decode_step(rng.normal(size=spec.D), state, spec, cfg, "secure", net)
print("layers reusing a selection:", [l for l, s in enumerate(info.selections) if s.shared_from is not None])
print("top-k comparisons this step:", net.ledger["topk"].comparison_invocations)
