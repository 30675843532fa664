"""Token-space self-supervised training with paired generative/discriminative codebooks."""

__version__ = "0.1.0"
