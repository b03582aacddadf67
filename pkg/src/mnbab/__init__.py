"""Complete ReLU-network verifier under lp-ball perturbations:
optimizable dual bounding with multi-neuron and split constraints inside
a branch-and-bound loop."""

from .bab import VerdictReport, verify
from .config import RunConfig
from .model import (
    Network,
    RobustnessSpec,
    VerificationProblem,
    encode_property,
    load_network,
    load_spec,
    save_network,
)

__all__ = [
    "Network",
    "RobustnessSpec",
    "RunConfig",
    "VerdictReport",
    "VerificationProblem",
    "encode_property",
    "load_network",
    "load_spec",
    "save_network",
    "verify",
]

__version__ = "0.1.0"
