"""Training-side plumbing: synthetic data, label files, the epoch loop, checkpoints."""
