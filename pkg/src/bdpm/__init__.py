"""Microbiome-based Parkinson's disease classifier: RFRE selection, LSTM+attention features, SVM head."""

__version__ = "0.1.0"
