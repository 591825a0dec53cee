"""Deep-RBF classifiers with a reject option and an adversarial-attack
benchmark harness."""

__version__ = "0.1.0"
