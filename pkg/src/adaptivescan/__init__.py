"""adaptivescan: history-aware adaptive LiDAR scanning at desk scale.

The pipeline predicts object queries for the next frame from a short history
buffer, turns them into a block-level scan mask sampled with Gumbel-Softmax,
senses a synthetic world at non-uniform beam density, and trains the whole
loop end to end through a heuristic differentiable voxelizer.
"""

__version__ = "0.1.0"
