"""Time the compiled kernels against the pure-numpy fallback.

Each mode runs in its own interpreter since the switch is read at import.

    python benchmarks/bench_kernels.py [--quick]
"""
import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from mmrssa.cert import feasibility_mask, uniform_states
from mmrssa.fastsim import rollout_batch
from mmrssa.kernels import additive_allocation
from mmrssa.model import segway_additive_model, segway_multiplicative_model
from mmrssa.safety import HAND_PARAMS, TiltIndex

scale = float(sys.argv[1])
idx = TiltIndex(HAND_PARAMS)
ma, mm = segway_additive_model(), segway_multiplicative_model()
X = uniform_states(int(2000 * scale), np.random.default_rng(0))
w, d, rho = np.array([0.5, 0.5]), np.array([0.0, 1.0]), np.array([1.0, 2.0])

cases = {
    "additive_allocation x1000": lambda: [additive_allocation(w, d, rho, 0.01, 1e-6) for _ in range(1000)],
    "feasibility_mask additive": lambda: feasibility_mask(X, ma, idx, solver="additive"),
    "feasibility_mask multiplicative": lambda: feasibility_mask(X, mm, idx),
    "rollout_batch 4 x %gs" % (2 * scale): lambda: rollout_batch(ma, idx, np.arange(4), T=2.0 * scale),
}
out = {}
for name, fn in cases.items():
    fn()  # warm-up, includes compilation
    t = time.perf_counter()
    fn()
    out[name] = time.perf_counter() - t
print(json.dumps(out))
"""


def run(disable: bool, scale: float) -> dict:
    env = dict(os.environ, MMRSSA_DISABLE_JIT="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", CHILD, str(scale)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="smaller workloads")
    args = ap.parse_args()
    scale = 0.25 if args.quick else 1.0
    jit, py = run(False, scale), run(True, scale)
    print(f"{'case':36s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}")
    for name in jit:
        print(f"{name:36s} {jit[name]:10.4f} {py[name]:10.4f} {py[name] / jit[name]:8.1f}")


if __name__ == "__main__":
    main()
