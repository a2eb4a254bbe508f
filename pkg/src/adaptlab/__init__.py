"""Small-scale toolkit for measuring how low-rank adapters shift perplexity.

Word-level tokenization, n-gram baselines, a tiny numpy transformer with
LoRA adapters, block quantization, a packed weight file format and a
perplexity comparison harness.
"""

__version__ = "0.1.0"
