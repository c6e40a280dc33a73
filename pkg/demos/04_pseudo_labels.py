# coding: utf-8

# # Pseudo-labels on a client
#
# A client labels its own low-resolution features with the broadcast head and
# keeps only confident pixels. Then it trains a copy of the head on them.

# In[1]:

import numpy as np

from fedmox.data import WorldConfig, extract_features, generate_world
from fedmox.federation import warmup
from fedmox.moe import HeadConfig, TaskHead
from fedmox.optim import OptimConfig
from fedmox.ssl import SSLConfig, client_local_train, generate_pseudo_labels

w = generate_world(WorldConfig(seed=0))
server_f = extract_features(w.backbone, w.server.images)
head, losses = warmup(TaskHead(HeadConfig(), 0), server_f, w.server.labels, 20, OptimConfig(), np.random.default_rng(0), 4)
print("warm-up loss", round(losses[0], 3), "->", round(losses[-1], 3))


# Coverage falls as the threshold rises. Above 1 nothing survives.

# In[2]:

client_f = extract_features(w.backbone, w.clients[0].images)
for th in (0.0, 0.5, 0.7, 0.9, 0.99, 1.01):
    print(f"threshold {th:<5} coverage {generate_pseudo_labels(head, client_f, th).coverage:.3f}")


# One local epoch. The broadcast head is left untouched.

# In[3]:

before = head.state_dict()
student, rep = client_local_train(head, client_f, SSLConfig(), OptimConfig(), np.random.default_rng(1), 4, client_id=0)
print(rep)
print("broadcast head unchanged:", all(np.array_equal(before[k], v) for k, v in head.state_dict().items()))
