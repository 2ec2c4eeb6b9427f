"""Visual odometry as label ranking: supervised Rank-N-Contrast on optical flow."""

__version__ = "0.1.0"
