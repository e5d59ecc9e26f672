"""Learnable Gabor texture features with a gated region branch, on a small numpy autodiff."""
from .autodiff import Tape, Tensor, backward, no_tape
from .gabor import FilterBank, GaborFilterSpec, apply_bank, synthesize, valid_ranges
from .texture import FilterCorrelation, LearnableHistogram
from .gate import RegionProposal, gate_infer, gate_train, make_proposals, saturating_sigmoid
from .data import DatasetManifest, TextureClassSpec, default_classes, gen_dataset, gen_sample, read_manifest, read_tensor, write_tensor
from .network import ModelConfig, TextureNet, evaluate, load_checkpoint, loss, save_checkpoint, train

__version__ = "0.1.0"
