"""Visual question answering with relation-fact mining and multi-step attention."""

__version__ = "0.1.0"
