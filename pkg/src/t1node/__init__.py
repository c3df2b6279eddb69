"""Cardiac MOLLI T1 mapping: signal model, classical fits, LSTM-ODE estimator, evaluation."""

__version__ = "0.1.0"
