# coding: utf-8

# # Parameter and FLOP accounting
#
# Analytic counts for the head, checked against the instrumented counter.

# In[1]:

import numpy as np

from fedmox.accounting import comm_per_round, count_flops, format_cost_report, measure_flops
from fedmox.data import FrozenBackbone
from fedmox.moe import HeadConfig, TaskHead

head = TaskHead(HeadConfig(num_experts=3), 0)
rep = count_flops(head, (8, 16, 16), "top1", FrozenBackbone())
rep.comm_per_round = comm_per_round(head, 1)
print(format_cost_report(rep))


# Sparse routing costs one expert plus the router. Going dense costs all K.

# In[2]:

for mode in ("single", "top1", "dense"):
    print(f"{mode:7s} {count_flops(head, (8, 16, 16), mode).total_head:>8,d}")
x = np.random.default_rng(0).standard_normal((8, 16, 16))
print("instrumented top1", measure_flops(head, x, "top1"))
