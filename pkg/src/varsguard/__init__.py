"""Attack, defend and evaluate a visually-aware (VBPR-style) recommender."""

__version__ = "0.1.0"
