"""Diffusion-augmented neural processes (DANPs) for 1D regression.

Multi-channel convolutional neural processes trained on noised copies of
the target set, deployed through an autoregressive denoising procedure
that mixes S conditional predictives into a non-Gaussian joint.
"""

from danp.noising import NoiseSchedule, solve_beta
from danp.datagen import GeneratorSpec, Task

__all__ = ["NoiseSchedule", "solve_beta", "GeneratorSpec", "Task"]
