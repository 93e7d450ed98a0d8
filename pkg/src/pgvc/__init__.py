"""Progressive generative video codec.

Encode a clip once; cut the bitstream anywhere on the inter-scale boundary
and every prefix still decodes, with the model hallucinating the scales that
were cut off. The pieces, bottom to top:

- ``frontend``   -- orthonormal block-DCT latents and the raw clip format
- ``msrq``       -- multi-scale residual binary quantization of latents
- ``ctxmodel``   -- the transformer that prices every bit (coding == generation)
- ``entcoder``   -- binary range coder driven by those prices
- ``container``  -- the on-disk framing; ``truncate`` lives here
- ``pipeline``   -- encode_video / decode_video and the stats plumbing
- ``cli``        -- the ``pgvc`` command-line tool

Everything is float64 and bit-reproducible across the numba and numpy
backends (select with ``PGVC_BACKEND=auto|numba|numpy``).
"""

from .backend import ACTIVE_BACKEND
from .container import read_container, truncate, write_container
from .ctxmodel import (
    ContextModelParams,
    ModelConfig,
    forward_full,
    init_params,
    load_model,
    loss_and_grads,
    save_model,
    train_step,
    zero_params,
)
from .entcoder import CodedSegment, ac_decode, ac_encode, quantize_probs, shannon_bits
from .errors import (
    CodecError,
    ConfigError,
    ContractError,
    DecodeError,
    ModelError,
    ParseError,
    ProtocolError,
    ShapeError,
    TrainError,
)
from .frontend import FrontendConfig, VideoClip, read_clip, write_clip
from .msrq import (
    ScalePyramid,
    ScaleSchedule,
    ScaleSpec,
    TokenMap,
    default_schedule,
    ms_dequantize,
    ms_quantize,
)
from .pipeline import (
    CodecConfig,
    DecodeStats,
    EncodeStats,
    decode_video,
    encode_video,
    psnr,
    pyramids_from_clip,
    synth_clip,
)

__version__ = "0.1.0"

__all__ = [
    "ACTIVE_BACKEND",
    "CodecConfig",
    "CodecError",
    "CodedSegment",
    "ConfigError",
    "ContextModelParams",
    "ContractError",
    "DecodeError",
    "DecodeStats",
    "EncodeStats",
    "FrontendConfig",
    "ModelConfig",
    "ModelError",
    "ParseError",
    "ProtocolError",
    "ScalePyramid",
    "ScaleSchedule",
    "ScaleSpec",
    "ShapeError",
    "TokenMap",
    "TrainError",
    "VideoClip",
    "ac_decode",
    "ac_encode",
    "decode_video",
    "default_schedule",
    "encode_video",
    "forward_full",
    "init_params",
    "load_model",
    "loss_and_grads",
    "ms_dequantize",
    "ms_quantize",
    "psnr",
    "pyramids_from_clip",
    "quantize_probs",
    "read_clip",
    "read_container",
    "save_model",
    "shannon_bits",
    "synth_clip",
    "train_step",
    "truncate",
    "write_clip",
    "write_container",
    "zero_params",
    "__version__",
]
