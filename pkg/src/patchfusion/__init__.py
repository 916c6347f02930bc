"""Backend-agnostic progressive patch-fusion engine for latent diffusion.

The engine grows a latent from a backend's native resolution to an S-times
larger one through upsample-diffuse-denoise phases, fusing overlapping
local crop denoising with dilated global sampling, all over an abstract
epsilon-prediction backend (deterministic mocks or a remote service).
"""

__version__ = "0.1.0"

from .backend import (DenoiseRequest, DenoiserHandle, LinearMockDecoder,
                      OracleDenoiser, RecordingDenoiser, RemoteDenoiser,
                      ReplayDenoiser, TileSpec, ZeroDenoiser, denoise_batch,
                      make_mock_backend, oracle_epsilon, tiled_decode)
from .errors import (BackendError, BackendUnreachable, CoverageError,
                     EngineError, FormatError, PipelineError, ProtocolError)
from .patching import (CropSet, DilationSet, dilated_reconstruct,
                       dilated_sample, extract_crops, jitter_crops,
                       make_dilation_set, plan_crops, reconstruct_local)
from .pipeline import (PhasePlan, PhaseResult, PipelineConfig, RunStats,
                       fuse_global_local, init_from_latent, make_phase_plan,
                       plan_phases, run_phase, run_phase1, run_pipeline,
                       skip_residual_blend)
from .schedule import (DecayParams, GuidanceSpec, NoiseSchedule,
                       build_schedule, cfg_combine, cosine_decay, ddim_step,
                       diffuse_closed_form, diffuse_trajectory, sigma_at)
from .storage import RunManifest, read_latent, write_latent, write_png
from .tensor import (GaussianKernel, Latent, RngStream, gaussian_filter,
                     gaussian_kernel, kernel_size_for_dilation, randn,
                     upsample_bicubic)

__all__ = [name for name in dir() if not name.startswith("_")]
