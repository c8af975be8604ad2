"""Compressive image recovery with AMP, VAMP and plug-in denoisers."""

from dvamp.amp import AmpState, amp_init, amp_iterate, amp_run
from dvamp.denoise import (DenoiserResult, DenoiserSpec, ExternalDenoiser, make_denoiser,
                           mc_divergence, soft_threshold, sure_tuned_soft_threshold,
                           ti_wavelet_denoise)
from dvamp.harness import (ExperimentConfig, load_images, load_pgm, run_sweep, run_trace,
                           save_pgm, synthesize_measurements)
from dvamp.oplib import (LinearOperator, SvdOperator, WaveletTransform, compose_measurement,
                         fwht, geometric_singular_values, make_gaussian_operator,
                         make_structured_operator)
from dvamp.result import TrialResult, psnr
from dvamp.vamp import VampConfig, VampState, vamp_init, vamp_iterate, vamp_run

__version__ = "0.1.0"
