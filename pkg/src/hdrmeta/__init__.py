"""Meta-learned LDR-to-HDR reconstruction.

The package trains a single network initialization that adapts to a new
scene from just two exposures of it, then reconstructs a normalized HDR
radiance map from one LDR image.  Everything runs on numpy: the autodiff
engine (with higher-order gradients), the UNet, the episodic training
loops, the image metrics, and the radiance file codec are all in-repo.

Entry points:

* :mod:`hdrmeta.tensor` - autodiff core and differentiable image ops
* :mod:`hdrmeta.unet` - the network, its parameters, checkpoints
* :mod:`hdrmeta.loss` - training loss, SSIM, PSNR
* :mod:`hdrmeta.meta` - adaptation, meta-training, evaluation
* :mod:`hdrmeta.data` - scenes, exposures, radiance codec, synthetic data
* ``hdrmeta`` console script - train / eval / adapt / gradcheck
"""

__version__ = "0.1.0"

from . import data, loss, meta, tensor, unet  # noqa: F401
