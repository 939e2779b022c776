"""EmoAnti anti-spoofing detector: feature files, metrics, checkpoints and the CLI."""

from ._emoanti import (
    CHECKPOINT_VERSION,
    FEATURE_VERSION,
    BadMagicError,
    Detector,
    Error,
    FormatError,
    InvalidArgument,
    IoError,
    NonFiniteDataError,
    NonFiniteError,
    ShapeError,
    StateError,
    TruncatedError,
    VersionError,
    compute_eer,
    compute_min_tdcf,
    decode_features,
    det_curve,
    encode_features,
    frontend_frame_count,
    read_feature_header,
    read_features,
    run_cli,
    write_features,
)

__all__ = [name for name in dir() if not name.startswith("_")]
