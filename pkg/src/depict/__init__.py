"""Two-stage layout-to-image synthesis on a synthetic shape benchmark.

The pipeline turns a box layout into a scene depth map with one small
diffusion model, then turns that depth map into an RGB image with a second
one, steered by a frequency-filtered depth control branch and a training-free
per-instance attention renderer.
"""

__version__ = "0.1.0"
