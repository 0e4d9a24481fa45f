"""Feature-space detection of AI-generated images.

The package learns a memory bank of prototype features from real images,
reconstructs each incoming feature map as a sparse attention mixture over
that bank, and classifies from how well the reconstruction fits: attention
perplexity statistics plus the reconstruction residual.
"""

__version__ = "0.1.0"
