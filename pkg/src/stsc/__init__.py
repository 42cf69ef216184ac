"""Swin-Transformer semantic communication codec with federated training and privacy attacks."""

from .channel import ChannelSpec, equalize, transmit
from .codec import CodecConfig, STSCCodec, compression_ratio, decode, encode, init_params
from .federation import FederationConfig, fedavg, run_federated_training
from .trainer import TrainConfig, evaluate, local_train

__version__ = "0.1.0"

__all__ = [
    "ChannelSpec", "CodecConfig", "FederationConfig", "STSCCodec", "TrainConfig", "compression_ratio",
    "decode", "encode", "equalize", "evaluate", "fedavg", "init_params", "local_train",
    "run_federated_training", "transmit",
]
