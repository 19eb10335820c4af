"""Dating and context classification of analog family-album photographs."""

__version__ = "0.1.0"
