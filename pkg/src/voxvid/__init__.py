"""voxvid: a neural volumetric video engine.

Training, rendering, and interactive playback of dynamic radiance fields
from multi-view video, with a swappable sampler/embedder/regressor pipeline
driven by an inheritable config system.
"""

__version__ = "0.1.0"
