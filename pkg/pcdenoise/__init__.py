"""pcdenoise - gradient-field point cloud denoising with a uniformity refinement network"""

__version__ = "1.0.0"
