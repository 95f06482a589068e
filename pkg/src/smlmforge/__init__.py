"""Single-molecule localization microscopy toolkit.

PSF models, camera noise, stack simulation, bead calibration, a classical
maximum-likelihood localizer, training-loss oracles, post-processing,
evaluation metrics and rendering.
"""

__version__ = "0.1.0"
