"""Two-branch masked-autoencoder deepfake detection on a numpy autodiff core."""

from masdt.tensor import NonFiniteError, ShapeError, Tensor, grad_check, no_grad
from masdt.vit import ViTClassifier, ViTConfig, ViTEncoder
from masdt.mae import MAEConfig, MaskedAutoencoder, random_mask
from masdt.flow import FlowField, FlowParams, estimate_flow, flow_to_image
from masdt.data import Clip, generate_dataset, generate_synthetic_clip, degrade_compression
from masdt.detect import BranchModel, FusionConfig, TrainConfig, finetune, predict_video
from masdt.checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
