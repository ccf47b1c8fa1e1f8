"""CSI fall detection: preprocessing, the variance gate, the detector and streaming helpers."""

from ._core import (
    ConfigError,
    Error,
    Model,
    ParameterError,
    ShapeError,
    ValidationError,
    alert_trace,
    channel_destandardize,
    channel_standardize,
    desk_model_config,
    focal_loss,
    gate,
    instance_normalize,
    live_window_tensor,
    local_variance,
    preprocess_window,
    read_replay,
    read_tensor_file,
    reorganize,
    run_cli,
    stream_replay,
    synth_dataset,
    synth_recording,
)

__all__ = [name for name in dir() if not name.startswith("_")]
