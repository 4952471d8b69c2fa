"""Music demixing at desk scale: spectrogram U-Net separators, a 1x1-conv
mixer refinement stage and two-stream blending, trained and evaluated with
a from-scratch float64 autodiff engine."""

__version__ = "0.1.0"
