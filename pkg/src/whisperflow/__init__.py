"""Whisper-to-normal speech conversion with conditional flow matching at toy scale."""

__version__ = "0.1.0"
