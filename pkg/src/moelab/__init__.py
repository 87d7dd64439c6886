"""Desk-scale mixture-of-experts language model laboratory.

Trains tiny MoE transformers on synthetic multilingual corpora with
controlled vocabulary overlap, measures routing behavior (expert usage,
entropy, cross-lingual JSD), and runs selective expert finetuning
strategies against their baselines.
"""

__version__ = "0.1.0"
