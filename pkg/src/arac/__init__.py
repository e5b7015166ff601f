"""Population actor-critic with flow policies and an attraction-repulsion archive."""

__version__ = "0.1.0"
