"""Robust audio-visual speech recognition at desk scale: synthetic paired
corpus, audio/visual corruption, masked and corrupted-prediction
self-distillation, recognition fine-tuning, and representation diagnostics."""

__version__ = "0.1.0"
