"""protofed: deterministic federated learning with multi-prototype contrastive training."""

__version__ = "0.1.0"
