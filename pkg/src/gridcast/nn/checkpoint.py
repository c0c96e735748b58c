"""Checkpointing: bit-exact round trip of parameters, optimizer state and scale."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..tensorfile import CHECKPOINT_MAGIC, pack, unpack
from .model import Model, NetworkConfig


def save_checkpoint(model: Model) -> bytes:
    header = {
        "kind": "model_checkpoint",
        "config": model.config.to_dict(),
        "scale": list(model.scale) if model.scale is not None else None,
        "adam_t": model.adam_t,
    }
    tensors: dict[str, np.ndarray] = {}
    tensors.update(model.named_parameters())
    tensors.update({f"state.{k}": v for k, v in model.named_state().items()})
    for name in model.adam_m:
        tensors[f"adam.m.{name}"] = model.adam_m[name]
        tensors[f"adam.v.{name}"] = model.adam_v[name]
    return pack(CHECKPOINT_MAGIC, header, tensors)


def load_checkpoint(data: bytes, expect_variant: Optional[str] = None) -> Model:
    header, tensors = unpack(data, CHECKPOINT_MAGIC)
    if header.get("kind") != "model_checkpoint":
        raise ValueError("not a model checkpoint")
    config = NetworkConfig.from_dict(header["config"])
    if expect_variant is not None and config.variant != expect_variant:
        raise ValueError(
            f"checkpoint was trained with variant {config.variant!r}, "
            f"not {expect_variant!r}")
    model = Model(config)
    dtype = config.np_dtype
    for name, param in model.named_parameters().items():
        if name not in tensors:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        param[...] = tensors[name].astype(dtype)
    state = model.named_state()
    for name, arr in state.items():
        key = f"state.{name}"
        if key not in tensors:
            raise ValueError(f"checkpoint is missing statistic {key!r}")
        arr[...] = tensors[key].astype(dtype)
    for name in model.named_parameters():
        mkey, vkey = f"adam.m.{name}", f"adam.v.{name}"
        if mkey in tensors:
            model.adam_m[name] = tensors[mkey].astype(dtype)
            model.adam_v[name] = tensors[vkey].astype(dtype)
    model.adam_t = int(header["adam_t"])
    model.scale = tuple(header["scale"]) if header["scale"] is not None else None
    return model


def save_checkpoint_file(model: Model, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model))


def load_checkpoint_file(path: str, expect_variant: Optional[str] = None) -> Model:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read(), expect_variant)
