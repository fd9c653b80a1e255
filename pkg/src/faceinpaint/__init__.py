"""Local facial-attribute inpainting with score-modulated dual cross-attention
and low-frequency sampling guidance, at toy scale."""

__version__ = "0.1.0"
