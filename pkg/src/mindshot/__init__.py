"""Few-shot cross-subject brain decoding on synthetic voxel data.

Subject-specific HRF adapters trained with Fourier-domain cross-subject
supervision on top of a frozen, contrastively pretrained encoder.
"""

__version__ = "0.1.0"
