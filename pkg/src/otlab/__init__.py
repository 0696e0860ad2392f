"""Semi-dual neural optimal transport: saddle objectives, two-timescale
training, benchmarks with known optimal maps, and an exact discrete oracle."""

__version__ = "0.1.0"
