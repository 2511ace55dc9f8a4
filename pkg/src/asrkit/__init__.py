"""Desk-scale two-pass streaming ASR lab.

A self-contained numpy implementation of a streaming two-pass speech
recognizer (unidirectional encoder + monotonic chunkwise attention first
pass, backward-LSTM extension + full attention second pass) together with
the tooling needed to study low-resource training recipes on synthetic
bilingual corpora: transfer learning with optional encoder freezing,
text-to-speech style data augmentation, and beam-score-filtered
semi-supervised training.
"""

from asrkit.errors import AsrkitError, DataError, DivergenceError

__version__ = "0.1.0"

__all__ = ["AsrkitError", "DataError", "DivergenceError", "__version__"]
