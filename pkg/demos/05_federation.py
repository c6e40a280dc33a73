# coding: utf-8

# # One federation, round by round
#
# Warm up on the server, then each round: sample clients, train them on
# pseudo-labels, average their heads, blend with the previous server head and
# train on the server again. Only the head travels.

# In[1]:

import numpy as np

from fedmox import FLConfig, HeadConfig, OptimConfig, SSLConfig, generate_world, run_federation
from fedmox.data import WorldConfig

w = generate_world(WorldConfig(seed=0))
fl = FLConfig(rounds=10, warmup_epochs=30, alpha=0.1, seed=0)
res = run_federation(fl, SSLConfig(), HeadConfig(num_experts=3), OptimConfig(), w)

for m in res.metrics:
    acc = " ".join(f"{v:.3f}" for v in m.per_domain_accuracy.values())
    print(f"round {m.round:2d}  total {m.total_accuracy:.3f}  per domain {acc}  clients {m.participants}")


# Soft mixture is a plain convex blend. alpha=0 keeps the aggregate and
# alpha=1 keeps the old server head.

# In[2]:

from fedmox import soft_mixture
from fedmox.moe import TaskHead

a, b = TaskHead(HeadConfig(), 1), TaskHead(HeadConfig(), 2)
mix = soft_mixture(a, b, 0.25)
k = "out.bias"
print(a.state_dict()[k][:2], b.state_dict()[k][:2], mix.state_dict()[k][:2])


# Communication: two copies of the head per participant per round, and the
# frozen backbone once at the start.

# In[3]:

print("head params", res.head.num_params())
print("round 0 backbone params sent", res.metrics[0].backbone_params_communicated)
print("per round head params sent", sorted({m.params_communicated for m in res.metrics[1:]}))
print("backbone hash constant:", len({m.backbone_hash for m in res.metrics}) == 1)
