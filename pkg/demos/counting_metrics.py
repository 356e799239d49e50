"""
Counting and localization metrics
=================================

Counting error compares predicted and true counts per image. Localization
pairs predictions with ground-truth points one to one: pairs farther apart
than ``tau`` do not count, and among all pairings the one with the most
valid pairs (then the smallest total distance) wins.
"""

import numpy as np

from w2lab.metrics import counting_errors, evaluate, localize_match

###############################################################################
# Counting: MAE and RMSE over images.

print(counting_errors([3, 5], [4, 7]))  # (1.5, sqrt(2.5))

###############################################################################
# A greedy nearest-first pairing would match prediction 0 to the second
# ground-truth point and leave one point unmatched. The optimal pairing finds
# both.

gt = [(0.0, 0.0), (0.1, 0.0)]
preds = [(0.09, 0.0), (0.19, 0.0)]
print(localize_match(gt, preds, tau=0.095))

###############################################################################
# Aggregated over several images.

rng = np.random.default_rng(0)
gts = [rng.uniform(size=(n, 2)) for n in (5, 8, 3)]
preds = [np.clip(g + rng.normal(0, 0.02, size=g.shape), 0, 1)[: len(g) - 1] for g in gts]
report = evaluate(gts, preds, tau=0.05)
print(report.to_dict())
