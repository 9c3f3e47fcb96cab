"""mediaprep: raw videos -> ordered frame images + mono WAV + manifest lines."""

__version__ = "0.1.0"

from .extract import PrepJob, extract
