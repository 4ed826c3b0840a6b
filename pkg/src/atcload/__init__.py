"""Controller workload prediction from evolving airspace graphs, with conformal prediction sets."""

__version__ = "0.1.0"
