"""Radio galaxy morphology generation with a dense autoencoder and
per-class Gaussian mixtures."""
from .datapipe import Dataset, Preprocessor, build_dataset, synth_galaxy
from .dnnae import DNNAE, ArchSpec, TrainConfig, build_dnnae, decode, encode, evaluate, train
from .gmm import GaussianMixtureEM, GmmModel, em_fit, gmm_logdensity, gmm_sample
from .pipeline import MorphologyGenerator, generate_morphologies
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "DNNAE",
    "Dataset",
    "GaussianMixtureEM",
    "GmmModel",
    "MorphologyGenerator",
    "Preprocessor",
    "RngStream",
    "TrainConfig",
    "build_dataset",
    "build_dnnae",
    "decode",
    "em_fit",
    "encode",
    "evaluate",
    "generate_morphologies",
    "gmm_logdensity",
    "gmm_sample",
    "synth_galaxy",
    "train",
]
