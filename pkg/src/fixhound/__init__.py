"""Detection of silent vulnerability-fixing commits from code-change deltas."""

__version__ = "0.1.0"
