"""covmap: mobile-coverage mapping and BTS-to-area weighting schemes.

Builds received-signal fields from extended Hata path loss, converts
antenna-level data to statistical-area estimates through five weighting
schemes, and ships a synthetic-world study for comparing them against a
known ground truth.
"""

__version__ = "0.1.0"
