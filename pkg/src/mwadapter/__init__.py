"""MultiWay-Adapter: bottleneck adapters for a MultiWay Transformer, at desk scale."""
from .adapters import AdapterConfig, attach_adapters, count_params, freeze_backbone
from .multiway import BackboneConfig, Modality, MultiWayModel, encode

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "BackboneConfig",
    "Modality",
    "MultiWayModel",
    "attach_adapters",
    "count_params",
    "encode",
    "freeze_backbone",
]
