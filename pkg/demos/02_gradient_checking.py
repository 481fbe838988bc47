"""Finite-difference verification of every analytic gradient path.

Runs the four check suites (transform Jacobians, sampler gradients,
layer kernels, full pipeline) at a reduced trial count and prints one
line per check. The same suites back `stn-align gradcheck`.
"""

from stn_align import gradcheck

for module, trials in (("transforms", 30), ("sampler", 30),
                       ("tensor", 8), ("pipeline", 1)):
    for result in gradcheck.run_suites(module, trials=trials, seed=0):
        print(result.line())
