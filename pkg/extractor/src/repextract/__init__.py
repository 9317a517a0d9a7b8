"""Hidden-state extraction for the bugprobe record format."""

__version__ = "0.1.0"
