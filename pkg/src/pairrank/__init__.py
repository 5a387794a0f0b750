"""Listwise antibody-antigen binding-strength ranking on synthetic data.

Two training stages: positive-unlabeled contrastive pre-training of dual
graph-convolutional encoders with meta-refined pseudo-labels, then listwise
fine-tuning of an induced-set-attention ranker under a Plackett-Luce
objective. See the README for the pipeline walkthrough.
"""

__version__ = "0.1.0"

from .config import ConfigError, RunConfig  # noqa: F401
from .synthdata import SynthConfig, SynthDataset, gen_dataset  # noqa: F401
