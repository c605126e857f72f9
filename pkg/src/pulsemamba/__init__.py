"""Remote-pulse video network on selective state-space scans, desk scale.

Self-contained stack: a float64 autodiff tensor engine, SSM scan kernels,
the two-stream temporal-difference Mamba network, a synthetic pulse-video
generator, the training/evaluation loops and a verification CLI.
"""

__version__ = "0.1.0"
