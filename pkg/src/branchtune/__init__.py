"""Desk-scale laboratory for continual self-supervised learning.

The package trains small convolutional encoders on incremental task
streams, adapts them to new tasks by attaching slim trainable branches
next to frozen convolutions, and folds each branch back into its host
kernel afterwards so the architecture never grows.  Representation
drift is measured layer by layer with centered-kernel-alignment scores,
and task performance with frozen-encoder linear probes.

Everything runs on a small reverse-mode autodiff engine built on numpy;
see ``branchtune.tensor``.
"""

__version__ = "0.1.0"
