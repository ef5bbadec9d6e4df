"""Touch-vision-language alignment at desk scale.

Contact cleaning of tactile trajectories, pseudo-label orchestration,
pairwise tri-modal contrastive training of a tactile encoder, and an
open-vocabulary classification and judged-description benchmark.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
