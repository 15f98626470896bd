"""finegrid - fine-grained urban flow inference with multi-scale representation learning."""

__version__ = "0.1.0"
