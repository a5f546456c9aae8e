"""Visit-cost prediction for chronic-care patients from EHR visit sequences.

Two encoder-decoder transformers: one trained on short-follow-up patients
that augments the training set of the other, which predicts next-year
visit cost types and the annual cost total.
"""

__version__ = "0.1.0"
