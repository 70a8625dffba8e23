"""Native authentication logic for small CNNs, plus certification and attack tooling."""

__version__ = "0.1.0"
