"""Speaker-embedding disentanglement with adversarial invariance, probing
classifiers and an LDA/PLDA verification backend, all in numpy."""

__version__ = "0.1.0"
