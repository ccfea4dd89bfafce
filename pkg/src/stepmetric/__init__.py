"""Occlusion-robust assembly-progress estimation via deep metric learning.

Submodules:
    datagen   - seeded synthetic dataset of cumulative assembly steps
    augment   - random-erasing pseudo-occlusion synthesis
    sampler   - five-sample training tuples over consecutive classes
    embednet  - shared-weight CNN embedding with exact gradients
    loss      - quadruplet/triplet hinge losses and the anomaly ramp
    trainer   - training loop, checkpoints, metrics history
    inference - gallery embedding and kNN with distance rejection
    evaluate  - confusion matrices, sweeps, embedding export
    cli       - the `stepmetric` command
"""

__version__ = "0.1.0"


def kernel_backend() -> str:
    """Name of the active kernel backend ('compiled' or 'numpy')."""
    from .kernels import BACKEND

    return BACKEND
