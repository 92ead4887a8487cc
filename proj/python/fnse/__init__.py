"""Python interface to the fnse speech-enhancement core."""

from ._fnse import (
    SAMPLE_RATE,
    CirmConfig,
    ConfigError,
    Error,
    NormState,
    NumericError,
    StateError,
    StftConfig,
    TrainingError,
    ValidationError,
    batch_stats,
    build_corpus,
    compress,
    decompress,
    default_corpus_config,
    feature_preset,
    finetune,
    istft,
    k_at,
    log_spectral_distance,
    mstft_presets,
    pretrain,
    resolve_config,
    seg_snr,
    selfcheck,
    si_sdr,
    stft,
    write_corpus,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
