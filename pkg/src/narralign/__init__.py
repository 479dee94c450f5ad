"""Sentence-to-video temporal alignment over precomputed feature sequences.

Subpackages cover the full pipeline: a small autodiff core (`autodiff`),
the narrated-video data model and synthetic corpus generator (`corpus`),
the joint and dual encoders (`model`), training objectives (`losses`),
mutual-agreement denoising (`denoise`), the two-stage trainer (`trainer`),
evaluation metrics and DTW decoding (`evaluate`), and subtitle curation
(`curation`). `cli` exposes everything as `narralign` subcommands.
"""

__version__ = "0.1.0"
