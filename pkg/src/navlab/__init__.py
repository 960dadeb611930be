"""Target-driven navigation laboratory: grid-world scenes, a siamese
actor-critic trained by asynchronous workers, baselines and experiments."""

__version__ = "0.1.0"
