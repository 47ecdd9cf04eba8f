"""
Wasserstein-1 distance between two samples
==========================================

The representation shift of a model is built from one-dimensional
Wasserstein distances. For empirical samples it is the area between the
two quantile functions, which we can check against scipy.
"""

import numpy as np
from scipy.stats import wasserstein_distance

from domainshift.repshift import wasserstein_1d

rng = np.random.default_rng(0)

# two point masses one unit apart
print(wasserstein_1d([0.0], [1.0]))

# a shifted copy of a sample moves by exactly the shift
a = rng.normal(size=500)
print(wasserstein_1d(a, a + 0.3))

# unequal sizes are fine, the quantile functions are integrated exactly
b = rng.normal(0.5, 2.0, size=123)
print(wasserstein_1d(a, b), wasserstein_distance(a, b))

# the distance grows as the second sample drifts away
for shift in [0.0, 0.25, 0.5, 1.0, 2.0]:
    print(f"shift {shift:4.2f}  W1 {wasserstein_1d(a, rng.normal(shift, 1.0, 400)):.3f}")
