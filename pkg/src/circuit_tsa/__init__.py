"""Power-system transient stability simulation through behavioral circuit compilation."""

__version__ = "0.1.0"
