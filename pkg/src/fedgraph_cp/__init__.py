"""Federated conformal prediction for partitioned graphs."""
