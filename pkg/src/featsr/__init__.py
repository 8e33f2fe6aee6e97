"""Feature-conditioned VE score-SDE super-resolution on synthetic faces."""

__version__ = "0.1.0"
