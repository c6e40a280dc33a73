# coding: utf-8

# # Driving experiments from the command line
#
# The `fedmox` console script wraps the library. Runs land in
# <out>/<config-hash>-seed<N>/, so differing configs never collide.

# In[1]:

import subprocess
import sys
import tempfile
from pathlib import Path

out = Path(tempfile.mkdtemp())
quick = ["--set", "federation.rounds=3", "--set", "federation.warmup_epochs=10"]

def fedmox(*args):
    r = subprocess.run([sys.executable, "-m", "fedmox.cli", *args], capture_output=True, text=True)
    print(r.stdout or r.stderr)
    return r.returncode

fedmox("run", "--seed", "1", "--out", str(out / "runs"), *quick)
run_dir = next((out / "runs").iterdir())
print(sorted(p.name for p in run_dir.iterdir()))
print((run_dir / "summary.csv").read_text())


# A small ablation grid, two workers. Rows come back in grid order.

# In[2]:

fedmox("ablate", "--method", "fedavg,fedmox", "--alpha", "0,0.5", "--jobs", "2", "--out", str(out / "abl"), *quick)
print(next((out / "abl").iterdir()).joinpath("ablation.csv").read_text())


# Where each expert works, at both resolutions.

# In[3]:

fedmox("viz-routing", "--checkpoint", str(run_dir / "head.npz"), "--out", str(out / "routing.csv"), *quick)
print((out / "routing.csv").read_text())
fedmox("gradcheck")
