"""HTTP bridge between a torch latent-diffusion model and the patch-fusion
wire protocol: noise prediction, latent decoding, and image encoding served
over POST /v1/denoise, /v1/decode, /v1/encode."""

__version__ = "0.1.0"

from .model import BridgeModel, load_checkpoint, make_tiny_checkpoint
from .service import create_app
