"""From-scratch SimAM ResNet for paired dental radiograph change classification."""
from .datapipe import AugmentPolicy, Label, RadiographPair, load_manifest, split, synth_generate
from .harness import TrainConfig, benchmark_grid, evaluate, f1_macro, train
from .resnet import ResNetConfig, build_model, load_checkpoint, param_count, save_checkpoint
from .simam import Placement, SimAMConfig, simam_forward
from .tensor import Tensor, backward, grad_check

__version__ = "0.1.0"
