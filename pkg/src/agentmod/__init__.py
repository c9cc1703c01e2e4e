"""Tool-augmented multimodal content moderation: tools, prompts, data generation, rewards and evaluation."""

__version__ = "0.1.0"
