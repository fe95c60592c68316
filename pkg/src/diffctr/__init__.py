"""diffctr: generative pretraining for CTR models via absorbing-mask corruption.

Two-stage training: mask-corruption generative pretraining over
(features, label) records, then full parameter transfer into a
supervised fine-tune on the click label. Includes exact small-scale
oracles for every closed-form identity the pipeline relies on.
"""

__version__ = "0.1.0"
