"""Train, compile and simulate binary/trinary convolutional networks on a
TrueNorth-style neurosynaptic core array."""

__version__ = "0.1.0"
