"""Standalone federation client: a PyTorch trainer speaking the TCP wire format."""

from .client import BridgeConfig, join_federation
from .data import Dataset, Sample
from .data import load as load_dataset
from .model import Manifest, PatchDetector, SchemaMismatch

__version__ = "0.1.0"
