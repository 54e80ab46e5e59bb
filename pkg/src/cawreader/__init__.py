"""Character-augmented word embeddings for cloze-style reading comprehension."""

__version__ = "0.1.0"
