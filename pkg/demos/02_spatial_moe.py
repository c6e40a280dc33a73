# coding: utf-8

# # Spatial mixture-of-experts head
#
# The task head is a 1x1 router that picks one expert per pixel, K small
# pointwise MLP experts and a shared classifier. Because the router works per
# pixel, the same head runs at any resolution.

# In[1]:

import numpy as np

from fedmox.moe import HeadConfig, TaskHead, expert_load, expert_mean_location

head = TaskHead(HeadConfig(in_channels=8, num_classes=4, num_experts=3), 0)
print(head.num_params(), "parameters")
for p in head.parameters():
    print(f"  {p.name:28s} {p.data.shape}")


# Route a high- and a low-resolution map. Every pixel is one-hot.

# In[2]:

rng = np.random.default_rng(1)
hi = rng.standard_normal((8, 16, 16))
lo = rng.standard_normal((8, 8, 8))
m_hi, m_lo = head.route(hi, "high"), head.route(lo, "low")
print("one-hot everywhere:", bool(np.all(m_hi.onehot.sum(axis=0) == 1)))
print("expert index map (low res):")
print(m_lo.index)


# Load per expert, and where in the image each expert tends to work.

# In[3]:

counts, frac = expert_load([m_hi, m_lo])
print("pixels", counts, "fraction", np.round(frac, 3))
for tag, locs in expert_mean_location([m_hi, m_lo]).items():
    print(tag, [None if p is None else tuple(round(v, 2) for v in p) for p in locs])


# Routing modes. top1 runs only the chosen expert per pixel, dense mixes all
# of them by router probability, domain_assigned skips the router.

# In[4]:

for mode in ("top1", "dense", "domain_assigned"):
    pred = head.predict(hi, mode=mode, domain_id=2)
    print(f"{mode:16s} class histogram {np.bincount(pred.ravel(), minlength=4)}")
