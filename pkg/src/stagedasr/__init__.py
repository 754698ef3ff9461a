"""Staged multi-task training for a streaming attention ASR model.

Everything runs on float64 NumPy arrays through a small reverse-mode
autodiff core (`stagedasr.tensor`).  The package covers the full path
from synthetic feature generation to beam-search decoding: character
CTC encoders, character-to-subword conversion stages, and a monotonic
chunkwise attention decoder.
"""

__version__ = "0.1.0"
