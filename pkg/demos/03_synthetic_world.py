# coding: utf-8

# # A synthetic multi-domain world
#
# Domain 0 lives on the server: labeled, high resolution. Each client holds
# one shifted domain at half resolution and no labels. A fixed random
# backbone turns images into 8-channel feature maps.

# In[1]:

import numpy as np

from fedmox.data import WorldConfig, downsample_images, extract_features, generate_world

w = generate_world(WorldConfig(seed=0))
print("server", w.server.images.shape, w.server.resolution_tag)
for c, d in zip(w.clients, w.client_domains):
    print(f"client domain {d}", c.images.shape, c.resolution_tag)
print("test", w.test.images.shape, "domains", sorted(set(w.test.domain_ids.tolist())))


# Each domain applies its own colour scale and bias. The feature means show
# the shift after the backbone.

# In[2]:

f = extract_features(w.backbone, w.test.images)
for d in range(4):
    mu = f[:, w.test.domain_ids == d].mean(axis=(1, 2, 3))
    print(d, np.round(mu, 2))


# Downsampling is a 2x2 average; labels never reach the clients.

# In[3]:

lo = downsample_images(w.test.images[:2])
print(w.test.images.shape[2:], "->", lo.shape[2:])
print("backbone hash", w.backbone.param_hash()[:16], "params", w.backbone.num_params())
