"""Mention-score classifier for gendered pronoun resolution.

Trains and evaluates a small three-way classifier head (A / B / NEITHER)
over precomputed per-token transformer hidden states, with every
forward/backward pass written and verified by hand.
"""

__version__ = "0.1.0"
