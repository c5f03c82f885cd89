"""Missing Data Encoder: channel-wise masked image completion with a
hide-and-seek adversarial loss, on a self-contained numpy substrate."""

__version__ = "0.1.0"
