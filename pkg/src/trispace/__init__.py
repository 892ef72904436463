"""Truck arrival-time estimation from sparse GPS trajectories.

Three views of each trajectory are combined: a selective state-space encoder
over the padded point sequence, 24 hand-crafted attribute statistics, and a
kNN relation graph that diffuses attributes between similar trajectories.
A histogram gradient-boosted regressor maps the fused features to travel time.
"""

__version__ = "0.1.0"
