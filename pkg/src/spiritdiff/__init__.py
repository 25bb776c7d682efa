"""SPIRiT-Diffusion: score-based multi-coil MRI reconstruction whose drift and
noise are shaped by SPIRiT self-consistency, with CG-SPIRiT and per-coil VE-SDE
baselines and a synthetic phantom pipeline."""

from .calibration import SpiritKernel, calibrate, extract_acs, kernel_adjoint
from .grid import SamplingMask, apply_mask, fft2c, ifft2c
from .operators import (
    ImageKernel,
    SensitivityMaps,
    acquire,
    acquire_adjoint,
    dc_replace,
    phi_image,
    phi_kspace,
    psi,
    q_project,
    self_consistency_residual,
)
from .recon import (
    nrmse,
    psnr,
    recon_cg_spirit,
    recon_spirit_diffusion,
    recon_vesde,
    recon_zero_filled,
)
from .scores import GaussianPrior, LinearScoreModel, dsm_loss, gaussian_score, train_dsm
from .sde import SamplerConfig, SdeSchedule, perturb, reverse_step, sample_reverse, simulate_forward

__version__ = "0.1.0"
