# Copyright 2026 The ctvr Authors
# SPDX-License-Identifier: Apache-2.0
"""Continual text-to-video retrieval: frozen two-tower backbone with frame
fusion and task-aware mixture-of-experts adapters."""

from ._core import (
    Backbone,
    ConfigError,
    CtvrError,
    DimensionError,
    FormatError,
    InputError,
    Model,
    NumericError,
    ProtocolError,
    Stream,
    UsageError,
    backward_forgetting,
    ct_loss,
    default_config,
    generate_stream,
    infonce,
    load_backbone,
    load_model,
    median_mean_rank,
    pretrain,
    rank_videos,
    read_store,
    recall_at_k,
    render_config,
    run_cli,
    run_stream,
    total_loss,
)

__all__ = [name for name in dir() if not name.startswith("_")]
