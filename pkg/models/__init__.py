from .base import BaseModel, ConfigurationError
from .cluster import TRACE_COLUMNS, ClockEvents, ClusterConfig, TraceRecord
from .experiment import ExperimentConfig, PolicyKind, PolicySpec
from .mdp import MdpHyper, MdpState, QNetParams
from .policy import PolicyContext, PolicyDecision
from .quantized import BIT_MAX, BIT_MIN, HEADER, QuantizedTensor, payload_size
from .tensor import Batch, Dataset, DataSpec, ModelSpec, ParamVector

__all__ = [
    "BaseModel",
    "ConfigurationError",
    "ParamVector",
    "Batch",
    "ModelSpec",
    "DataSpec",
    "Dataset",
    "QuantizedTensor",
    "HEADER",
    "BIT_MIN",
    "BIT_MAX",
    "payload_size",
    "MdpHyper",
    "MdpState",
    "QNetParams",
    "ClusterConfig",
    "ClockEvents",
    "TraceRecord",
    "TRACE_COLUMNS",
    "ExperimentConfig",
    "PolicySpec",
    "PolicyKind",
    "PolicyContext",
    "PolicyDecision",
]
