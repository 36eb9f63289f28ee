"""Binary checkpoints for velocity models and CSV loss curves.

Checkpoint layout, little-endian::

    b"FWM1"  u32 version
    u32 blocks  u32 width  u8 conditioning  u8 mixer
    u32 latent_dim  u32 content_dim  u32 speaker_dim  u32 time_dim
    u32 kernel_size  u32 mlp_ratio
    u64 parameter_count
    f32 x parameter_count   (flat vector in ``VelocityModel.layout`` order)
"""
from __future__ import annotations

import csv
import os
import struct

import numpy as np
import torch

from .model import ConditioningMode, ModelConfig, TokenMixer, VelocityModel

MAGIC = b"FWM1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIBBIIIIIIQ")
_CONDITIONING = [ConditioningMode.PREPEND, ConditioningMode.CROSS_ATTENTION]
_MIXERS = [TokenMixer.SELF_ATTENTION, TokenMixer.TEMPORAL_CONV]


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, model: VelocityModel) -> None:
    cfg = model.config
    flat = model.get_flat().astype("<f4")
    header = _HEADER.pack(MAGIC, VERSION, cfg.blocks, cfg.width,
                          _CONDITIONING.index(cfg.conditioning), _MIXERS.index(cfg.mixer),
                          cfg.latent_dim, cfg.content_dim, cfg.speaker_dim, cfg.time_dim,
                          cfg.kernel_size, cfg.mlp_ratio, flat.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(flat.tobytes())


def load_checkpoint(path: str | os.PathLike) -> VelocityModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint truncated")
    (magic, version, blocks, width, cond, mixer, latent_dim, content_dim, speaker_dim,
     time_dim, kernel, ratio, count) = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if cond >= len(_CONDITIONING) or mixer >= len(_MIXERS):
        raise CheckpointError("unknown architecture enum")
    config = ModelConfig(latent_dim=latent_dim, content_dim=content_dim, speaker_dim=speaker_dim,
                         blocks=blocks, width=width, conditioning=_CONDITIONING[cond],
                         mixer=_MIXERS[mixer], time_dim=time_dim, kernel_size=kernel,
                         mlp_ratio=ratio)
    torch.manual_seed(0)
    model = VelocityModel(config)
    if count != model.parameter_count():
        raise CheckpointError(f"parameter count {count} does not match architecture "
                              f"({model.parameter_count()})")
    body = blob[_HEADER.size:]
    if len(body) != 4 * count:
        raise CheckpointError("checkpoint body has the wrong size")
    model.set_flat(np.frombuffer(body, dtype="<f4").astype(np.float32))
    model.eval()
    return model


def write_loss_curve(path: str | os.PathLike, losses) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in losses:
            writer.writerow([step, repr(float(loss))])


def read_loss_curve(path: str | os.PathLike) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "loss"]:
        raise ValueError("loss curve must start with a step,loss header")
    return [(int(s), float(v)) for s, v in rows[1:]]
