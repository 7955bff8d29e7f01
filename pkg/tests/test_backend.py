import os
import subprocess
import sys

SCRIPT = """
import hashlib, numpy as np
from tmecontrol import _accel, features, sim
traj = sim.simulate(sim.nominal_parameters(r_adh=0.7), 3, 30, grid_size=30)
series = features.featurize_trajectory(traj)
h = hashlib.sha256(np.stack([c.to_grid() for c in traj]).tobytes() + series.matrix.tobytes())
print(_accel.backend_name(), h.hexdigest())
"""


def run(flag):
    env = {**os.environ, "TMECONTROL_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return out.stdout.split()


def test_env_flag_selects_fallback_with_identical_results():
    fast, slow = run("1"), run("0")
    assert fast[0] == "numba" and slow[0] == "numpy"
    assert fast[1] == slow[1]
