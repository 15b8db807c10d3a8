"""Four-tier KV-cache placement simulator for long reasoning traces."""

__version__ = "0.1.0"
