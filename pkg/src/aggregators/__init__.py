"""Aggregator modules auto-discovered by the runner."""
