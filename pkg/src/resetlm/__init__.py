"""resetlm: a desk-scale lab for active-forgetting pretraining.

Pretrains decoder-only language models with periodic token-embedding resets,
adapts them to new languages via vocabulary expansion over a frozen trunk,
instruction-finetunes on chat-formatted data, and measures cross-lingual
transfer (perplexity, isotropy, translation BLEU) aggregated over language
classes.
"""

__version__ = "0.1.0"
