"""Data-free quantization of a small vision transformer, on a numpy autodiff tape."""
from .autodiff import GradTape, ShapeError, TapeError, Tensor
from .checkpoint import CorruptCheckpoint, load_checkpoint, save_checkpoint
from .config import load_config, parse_config
from .data import SyntheticSpec, make_synthetic
from .losses import discrepancy_mae, generator_loss, kde_entropy, patch_similarity, pse_loss
from .pipeline import PipelineConfig, evaluate, run_pipeline
from .quantizer import QuantizedModel, QuantParams, fake_quant
from .vit import ViTConfig, init_params, model_forward, pretrain_toy

__version__ = "0.1.0"
