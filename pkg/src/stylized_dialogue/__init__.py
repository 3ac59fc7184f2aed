"""Stylized dialogue generation trained from paired dialogues plus unpaired stylised text."""

__version__ = "0.1.0"
