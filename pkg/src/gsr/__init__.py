"""Graph structural residuals: learn a reference and an observation graph
from multivariate time series by self-supervised denoising, and diagnose
structural faults as thresholded deviations between the two."""

__version__ = "0.1.0"
