"""Few-shot text classification by prompting a small masked language model,
with confidence-gated self-training on unlabeled text."""

__version__ = "0.1.0"
