"""3-D CNN over descriptor grids: temporal feature vectors and a toy activity head.

Run: python3 demos/02_motion_encoder.py
"""
import numpy as np

from vdc.encoder import Conv3DConfig, Conv3DNet, encode, motion_map, temporal_vectors
from vdc.trainer import classifier_accuracy, train_classifier

# Default stack: a 15x15x120 grid pools down to 1x1x15 with 352 channels.
cfg = Conv3DConfig()
print("default output extent", cfg.output_extent((15, 15, 120)), "channels", cfg.d_motion)

# A narrow stack on a small grid, resampled onto 26 slots and appended to appearance.
rng = np.random.default_rng(0)
net = Conv3DNet(Conv3DConfig(in_channels=4, channels=(8, 8, 16),
                             pools=((2, 2, 2), (1, 1, 2), (1, 1, 2))), seed=0)
grid = np.abs(rng.normal(size=(4, 4, 104, 4)))
fmap = motion_map(grid, net)
print("feature map", fmap.shape, "-> slots", temporal_vectors(fmap, 26).shape)
fs = encode(rng.normal(size=(26, 32)), grid, net)
print("encoded V", fs.vectors.shape)

# Activity recognition: class 0 is active early in time, class 1 late.
grids, labels = [], []
for i in range(40):
    y = i % 2
    g = 0.1 * rng.random((8, 8, 8, 2))
    g[:, :, 4 * y:4 * y + 4, y] += 1.0
    grids.append(g)
    labels.append(y)
head = Conv3DNet(Conv3DConfig(in_channels=2, channels=(4, 4, 4), input_extent=(8, 8, 8),
                              fc_dim=8, task_classes=(2,), dropout=0.0), seed=0)
print("accuracy before", classifier_accuracy(head, grids, labels))
costs = train_classifier(head, grids, labels, epochs=10)
print("cost per epoch", np.round(costs, 4))
print("accuracy after", classifier_accuracy(head, grids, labels))
