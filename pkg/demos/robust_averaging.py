"""Averaging scalars when a third of them are gross outliers.

The plain mean is dragged towards the outliers; the annealed truncated
least-squares solve recovers the consistent cluster and flags the rest.
"""

import numpy as np
from scipy.stats import chi2

from sgfuse.gnc import RobustProblem, VectorPrior, solve_gnc

rng = np.random.default_rng(3)
inliers = 4.0 + rng.normal(0, 0.3, 8)
outliers = rng.uniform(20, 60, 4)
meas = np.concatenate([inliers, outliers])[:, None]
print("measurements:", np.round(meas.ravel(), 2))
print(f"plain mean:   {meas.mean():.3f}")

problem = RobustProblem([np.zeros(1)], [VectorPrior(np.zeros(len(meas), int), meas, np.eye(1), True)])
res = solve_gnc(problem)
print(f"robust mean:  {res.values[0][0]:.3f}  (inlier mean {inliers.mean():.3f})")
print(f"threshold:    {np.sqrt(chi2.ppf(0.99, 1)):.3f}")
print("inliers:     ", res.inlier_mask.astype(int))
print(f"outer iterations: {res.iterations}, converged: {res.converged}")
for step in res.history:
    print(f"  mu={step.mu:10.4g}  weights in [{step.weight_min:.3f}, {step.weight_max:.3f}]  cost {step.cost_after:.3f}")
