"""Open-vocabulary keyword spotting by text enrollment.

A text encoder embeds enrolled keywords (as phoneme sequences) and an
acoustic encoder embeds audio; matching is cosine similarity between
pooled utterance embeddings. Training aligns the two modalities with
phoneme-level cross-attention matching, a zoo of deep-metric-learning
objectives, keyword classification heads, and an adversarial modality
classifier behind a gradient reversal layer.
"""

__version__ = "0.1.0"
