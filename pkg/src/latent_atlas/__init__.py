"""Desk-scale laboratory for optimization-based GAN inversion.

A miniature style-based generator, nine latent spaces (including the
hypersphere-retracted per-layer codes combined with an intermediate
feature map), optimization-based inversion with sphere retraction,
semantic-direction editing, and the reconstruction/editing evaluation
protocol, all on plain numpy with a from-scratch reverse-mode tape.
"""

__version__ = "0.1.0"

from .autodiff import Graph, Tensor, gradcheck
from .generator import GeneratorBundle, GeneratorConfig, init_generator, synthesize, tap_feature
from .spaces import LatentCode, PnModel, fit_pn, lift, pn_distance, retract, sample_codes
from .inversion import InversionConfig, InversionResult, PtiConfig, init_code, invert, pivotal_tune
from .directions import Direction, apply_edit, boundary_direction, edit_sweep, pca_directions
from .metrics import FeatureExtractor, identity_similarity, mse, noninferiority_test, perceptual, ssim
