"""Vector post-training quantization of weight matrices with Hessian error feedback."""
__version__ = "0.1.0"

from .baselines import SweepReport, ar1_synthetic, gptq_uniform, rtn_quantize, run_sweep, sqnr_db
from .codebook import (
    Codebook,
    PointSet,
    SeedMethod,
    Storage,
    e_step,
    em_objective,
    kmeanspp_seed,
    m_step,
    mahalanobis_seed,
    run_em,
)
from .engine import QuantizedLayer, VQConfig, proxy_loss, quantize_layer, reconstruct
from .errors import GPTVQError, InputError, NumericError
from .numerics import HessianContext, build_hessian, load_tensor, prepare_context, save_tensor
from .postproc import (
    blockwise_normalize,
    codebook_update,
    denormalize,
    int4_pipeline,
    quantize_codebook,
    svd_compress_codebooks,
)
from .vqformat import bits_per_value, decode_container, load_layer, parse_container, serialize

__all__ = [
    "Codebook",
    "GPTVQError",
    "HessianContext",
    "InputError",
    "NumericError",
    "PointSet",
    "QuantizedLayer",
    "SeedMethod",
    "Storage",
    "SweepReport",
    "VQConfig",
    "ar1_synthetic",
    "bits_per_value",
    "blockwise_normalize",
    "build_hessian",
    "codebook_update",
    "decode_container",
    "denormalize",
    "e_step",
    "em_objective",
    "gptq_uniform",
    "int4_pipeline",
    "kmeanspp_seed",
    "load_layer",
    "load_tensor",
    "m_step",
    "mahalanobis_seed",
    "parse_container",
    "prepare_context",
    "proxy_loss",
    "quantize_codebook",
    "quantize_layer",
    "reconstruct",
    "rtn_quantize",
    "run_em",
    "run_sweep",
    "save_tensor",
    "serialize",
    "sqnr_db",
    "svd_compress_codebooks",
]
