"""Efficient residual encoding: low-rank + quantized compression of the
difference between a base checkpoint and a fine-tuned checkpoint."""

from .allocator import (AllocationConfig, AllocationPlan, allocate,
                        budget_from_prior, clamped_rank, mix_prior,
                        round_and_repair, solve_lambda)
from .analysis import (PerturbConfig, ToyNet, alpha_sweep, feature_cosine,
                       lowrank_perturb, perturb, train_toy_pair)
from .codec import (EreArchive, EreConfig, compute_residual, decode, encode,
                    read_ere, size_report, verify, write_ere)
from .quantizer import (QuantizedFactor, RankDeficiencyWarning, decode_half,
                        dequantize, encode_half, quantize, stiefel_project)
from .spectral import (SpectralProfile, SvdFactors, build_profile,
                       effective_rank, mp_singular_quantiles, svd_full,
                       tail_energy, truncate)
from .tensor_archive import ArchiveError, TensorMap, TensorSpec, read_archive, write_archive

__version__ = "0.1.0"

__all__ = [
    "AllocationConfig", "AllocationPlan", "allocate", "budget_from_prior",
    "clamped_rank", "mix_prior", "round_and_repair", "solve_lambda",
    "PerturbConfig", "ToyNet", "alpha_sweep", "feature_cosine",
    "lowrank_perturb", "perturb", "train_toy_pair",
    "EreArchive", "EreConfig", "compute_residual", "decode", "encode",
    "read_ere", "size_report", "verify", "write_ere",
    "QuantizedFactor", "RankDeficiencyWarning", "decode_half", "dequantize",
    "encode_half", "quantize", "stiefel_project",
    "SpectralProfile", "SvdFactors", "build_profile", "effective_rank",
    "mp_singular_quantiles", "svd_full", "tail_energy", "truncate",
    "ArchiveError", "TensorMap", "TensorSpec", "read_archive", "write_archive",
]
