"""Loss-resilient, rate-adaptive video streaming over semantic token matrices
and sparse pixel residuals, with a deterministic proxy tokenizer."""

__version__ = "0.1.0"

from .codec import CodecConfig, TokenMatrix, blend_boundary, decode_gop, downscale_frame, encode_gop, upscale_frame
from .ratecontrol import BandwidthEstimator, Mode, RateAnchors, RateController, compute_anchors
from .residual import SparseResidual, aggregate_residual, apply_residual, compute_residual, raw_residual_rate, sparsify_quantize
from .selection import SimilarityMap, build_drop_mask, drop_rate_for_bandwidth, token_similarity
from .session import SessionConfig, SessionResult, run_streaming_session
from .transport import GopAssembly, TokenPacket, loss_policy, packetize_tokens, reassemble
from .video import Frame, GoP, QualityReport, boundary_flicker, load_raw_video, psnr, segment_gops

__all__ = [
    "__version__",
    "BandwidthEstimator", "CodecConfig", "Frame", "GoP", "GopAssembly", "Mode",
    "QualityReport", "RateAnchors", "RateController", "SessionConfig", "SessionResult",
    "SimilarityMap", "SparseResidual", "TokenMatrix", "TokenPacket",
    "aggregate_residual", "apply_residual", "blend_boundary", "boundary_flicker",
    "build_drop_mask", "compute_anchors", "compute_residual", "decode_gop",
    "downscale_frame", "drop_rate_for_bandwidth", "encode_gop", "load_raw_video",
    "loss_policy", "packetize_tokens", "psnr", "raw_residual_rate", "reassemble",
    "run_streaming_session", "segment_gops", "sparsify_quantize", "token_similarity",
    "upscale_frame",
]
