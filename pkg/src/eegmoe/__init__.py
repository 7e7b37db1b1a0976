"""Spectrally-masked self-supervised pretraining and PSD-gated
mixture-of-experts fine-tuning for multichannel EEG-like signals."""

__version__ = "0.1.0"
