"""Deep Q-learning network intrusion detection on NSL-KDD."""

__version__ = "0.1.0"
