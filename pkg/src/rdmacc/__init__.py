"""Simulated RDMA cluster and distributed concurrency-control protocols."""

__version__ = "0.1.0"
