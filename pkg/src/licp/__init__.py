"""Learning-based ICP: CAD-to-scan alignment with a reinforcement-learned
rotation policy, plus synthetic data generation and scene recomposition."""

__version__ = "0.1.0"
