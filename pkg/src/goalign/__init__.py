"""Global-local image/text alignment on synthetic scenes."""

__version__ = "0.1.0"
