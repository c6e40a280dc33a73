# coding: utf-8

# # A tiny reverse-mode engine
#
# Everything in fedmox trains through `fedmox.tensor`, a float64 autodiff
# engine over numpy arrays. Feature maps are channel-first: C x H x W, or
# C x B x H x W for a batch.

# In[1]:

import numpy as np

from fedmox import tensor as T
from fedmox.tensor import Parameter

rng = np.random.default_rng(0)


# A 1x1 convolution is a matmul over the channel axis. Build one, push a
# random map through it and take the mean.

# In[2]:

w = Parameter(rng.standard_normal((4, 3)), "w")
b = Parameter(np.zeros(4), "b")
x = rng.standard_normal((3, 5, 5))

y = T.relu(T.conv1x1(x, w, b))
loss = T.mean(y)
T.backward(loss)
print("loss", loss.data)
print("grad of w has shape", w.grad.shape)


# Check one coordinate against a central difference.

# In[3]:

def f(wv):
    return np.maximum(np.einsum("oc,chw->ohw", wv, x) + b.data[:, None, None], 0).mean()

h = 1e-6
wp, wm = w.data.copy(), w.data.copy()
wp[1, 2] += h
wm[1, 2] -= h
print("autodiff", w.grad[1, 2], "finite difference", (f(wp) - f(wm)) / (2 * h))


# The engine also counts linear-op FLOPs (2 per multiply-add), bucketed by
# named scope. This is what the cost report is built on.

# In[4]:

with T.count_flops() as fc:
    with T.flop_scope("demo"):
        T.conv1x1(x, w, b)
print(fc.by_scope, "expected", 2 * 4 * 3 * 25)
