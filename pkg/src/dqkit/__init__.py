"""dqkit: joint knowledge distillation + uniform quantization for small
encoder-decoder transformers, with dynamic teacher/student layer matching."""

__version__ = "0.1.0"
