"""Audio deepfake detection as audio question answering.

Toolkit pieces: WAV/mel frontend, balanced corpus tooling, prompt templates
with a byte tokenizer, a small audio+text causal LM with LoRA adapters,
supervised fine-tuning, constrained/free-form evaluation, and a backend
abstraction that can drive remote detector services over a line-JSON bridge.
"""

__version__ = "0.1.0"
