"""Benchmark harness, crash injection and the verification oracle."""
