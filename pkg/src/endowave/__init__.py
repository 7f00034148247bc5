"""4D Gaussian splatting for deformable scenes with flow and rational-wavelet supervision."""

__version__ = "0.1.0"
