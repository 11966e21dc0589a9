"""Simulator for private transformer decoding on three-party replicated
secret sharing, with hierarchical KV-cache eviction."""

__version__ = "0.1.0"
