"""List-grounded question answering: corpus parsing, data synthesis, ISL, retrieval and evaluation."""

__version__ = "0.1.0"
