"""Word-level stuttered-speech detection on frozen self-supervised speech backbones."""

__version__ = "0.1.0"
