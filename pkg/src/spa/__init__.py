"""Architecture search over message-passing encoders for temporal KG completion."""

__version__ = "0.1.0"
