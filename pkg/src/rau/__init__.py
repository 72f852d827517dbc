"""Recurrent attention unit (RAU) with GRU/LSTM baselines, exact BPTT, and experiment CLI."""

__version__ = "0.1.0"
