"""
Token versus cluster gathering
==============================

Pulling rows out of a secret cache at secret positions costs one equality
test per candidate slot.  Addressing clusters of s tokens shrinks both the
number of candidates and the bit width of each test.
"""

import numpy as np

from mpcache import ring
from mpcache.gather import gather_cost_model, gather_tokens
from mpcache.rss import PartyNet, reconstruct, share, share_float

T, C, k1, k2 = 1024, 64, 256, 16
rng = np.random.default_rng(0)
K = rng.normal(size=(T, 8))

# %%
# Retrieve the same number of tokens (256) both ways.
net = PartyNet(seed=0)
Ks = share_float(net, K)
tokens = share(net, rng.choice(T, k1, replace=False), 0, width=ring.bit_width(T))
clusters = share(net, rng.choice(C, k2, replace=False), 0, width=ring.bit_width(C))

with net.phase("token"):
    a = gather_tokens(net, Ks, tokens)
with net.phase("cluster"):
    b = gather_tokens(net, Ks, clusters, "cluster", T // C)
print("gathered shapes:", a.shape, b.shape)
print("token rows correct:", np.array_equal(reconstruct(net, a), ring.fx_encode(K)[reconstruct(net, tokens).astype(int)]))

# %%
# The ledger agrees with the analytic model.
model = gather_cost_model(T, C, k1, k2)
for mode in ("token", "cluster"):
    cost = net.ledger[mode]
    print(f"{mode:>8}: {cost.equality_invocations:7d} equalities at widths {dict(cost.bit_widths)}, "
          f"{cost.bytes_sent / 1e6:.2f} MB")
print("formula ratio (k1 T log T)/(k2 C log C):", round(model["comm_ratio"], 2))
print("measured byte ratio:", round(net.ledger["token"].bytes_sent / net.ledger["cluster"].bytes_sent, 2))
