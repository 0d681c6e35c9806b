"""Dual-modal masked pre-training and mixture-of-adapter-experts fine-tuning for
static and dynamic facial expression recognition, built on a small numpy autodiff."""

__version__ = "0.1.0"
