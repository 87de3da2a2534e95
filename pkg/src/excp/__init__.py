"""Checkpoint compression toolkit: residual encoding, joint weight/momentum
pruning, codebook quantization and entropy-compressed archive chains."""

from .errors import ContainerError, ExcpError, MismatchError, ValidationError
from .tensor_store import (
    CheckpointBundle,
    TensorRecord,
    bundle_hash,
    read_bundle,
    tensor_map_digest,
    write_bundle,
)
from .residual import ResidualBundle, apply_residual, compute_residual
from .joint_prune import (
    PruneConfig,
    PruneMasks,
    apply_masks,
    compute_masks,
    momentum_mask,
    weight_mask,
)
from .quantizer import (
    QuantConfig,
    QuantizedTensor,
    RawTensor,
    dequantize,
    fit_codebook,
    pack_codes,
    quantize,
    unpack_codes,
)
from .codec import (
    CompressedArchive,
    SizeReport,
    decode_archive,
    encode_archive,
    measure_sizes,
)
from .pipeline import (
    BundleBase,
    ChainManifest,
    CheckpointChain,
    PipelineConfig,
    SeedBase,
    compress_step,
    reconstruct_step,
    register_initializer,
    replay_chain,
    retention_apply,
)
from .train_harness import (
    AdamHyper,
    AdamState,
    RegretConfig,
    RunReport,
    TrainConfig,
    adam_step,
    ablation_suite,
    regret_experiment,
    run_training,
)

__version__ = "0.1.0"

__all__ = [
    "AdamHyper",
    "AdamState",
    "BundleBase",
    "ChainManifest",
    "CheckpointBundle",
    "CheckpointChain",
    "CompressedArchive",
    "ContainerError",
    "ExcpError",
    "MismatchError",
    "PipelineConfig",
    "PruneConfig",
    "PruneMasks",
    "QuantConfig",
    "QuantizedTensor",
    "RawTensor",
    "RegretConfig",
    "ResidualBundle",
    "RunReport",
    "SeedBase",
    "SizeReport",
    "TensorRecord",
    "TrainConfig",
    "ValidationError",
    "adam_step",
    "ablation_suite",
    "apply_masks",
    "apply_residual",
    "bundle_hash",
    "compress_step",
    "compute_masks",
    "compute_residual",
    "decode_archive",
    "dequantize",
    "encode_archive",
    "fit_codebook",
    "measure_sizes",
    "momentum_mask",
    "pack_codes",
    "quantize",
    "read_bundle",
    "reconstruct_step",
    "register_initializer",
    "regret_experiment",
    "replay_chain",
    "retention_apply",
    "run_training",
    "tensor_map_digest",
    "unpack_codes",
    "weight_mask",
    "write_bundle",
]
