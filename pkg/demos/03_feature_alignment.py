"""
Aligning mixed features with a bank of source prototypes
========================================================

A toy run of the nearest-prototype L1 loss: centroids of mixed-domain
regions are pulled toward the closest stored source centroid of their class.
"""

# %%
import numpy as np

from cmomlab import fatc

rng = np.random.default_rng(0)
D = 4
bank = fatc.FeatureBank(D, capacity=50)
# source prototypes of two classes, around different means
for c, mean in ((0, 0.0), (1, 3.0)):
    for k in range(20):
        bank.push(fatc.FeatureCentroid(cls=c, instance=k, values=mean + 0.3 * rng.standard_normal(D)))
print("bank occupancy", bank.occupancy())

# %%
# Mixed-domain features: class regions shifted away from the source means.
features = rng.standard_normal((D, 16, 16)) + 1.5
masks = {0: np.zeros((16, 16), bool), 1: np.zeros((16, 16), bool)}
masks[0][:, :8] = True
masks[1][:, 8:] = True

for step in range(6):
    cents = []
    for c, m in masks.items():
        cents += fatc.compute_centroids(features, [m], c)
    loss, grads = fatc.feature_alignment_loss(cents, bank)
    g = fatc.centroid_feature_gradient(cents, grads, features.shape)
    print(f"step {step}: loss {loss:.3f}")
    # plain gradient descent on the features themselves
    features -= 40.0 * g
