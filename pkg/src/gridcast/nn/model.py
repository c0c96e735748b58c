"""The two forecasting networks: convolutional and per-cell.

Both share one layout: per lag family, an input conv lifts the frame stack to
a hidden width, a chain of pre-activation residual units (BN - ReLU - conv,
twice, around an identity shortcut) transforms it, and an output conv reduces
back to one channel. Branch outputs are fused cell-wise through learned
weight matrices, an external-feature map is added, and a tanh bounds the
result to match targets scaled onto [-1, 1].

The per-cell variant is the same graph with every conv at kernel size 1, so
each cell's prediction depends only on that cell's own history plus the
external vector.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import BatchNorm, Conv2D, Dense, ReLU, mse_loss

BRANCH_ORDER = ("nearby", "period", "trend")


@dataclass(frozen=True)
class NetworkConfig:
    rows: int
    cols: int
    external_size: int
    variant: str = "conv"
    len_nearby: int = 3
    len_period: int = 3
    len_trend: int = 3
    channels_hidden: int = 32
    residual_units: int = 6
    external_hidden: int = 10
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in ("conv", "per_cell"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid shape must be positive")
        if self.channels_hidden < 1 or self.residual_units < 1:
            raise ValueError("channels_hidden and residual_units must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")

    @property
    def kernel_size(self) -> int:
        # conv variant is fixed at 3x3; per-cell uses 1x1 everywhere
        return 3 if self.variant == "conv" else 1

    @property
    def branch_lengths(self) -> dict[str, int]:
        return {"nearby": self.len_nearby, "period": self.len_period,
                "trend": self.len_trend}

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "rows": self.rows, "cols": self.cols, "external_size": self.external_size,
            "variant": self.variant, "len_nearby": self.len_nearby,
            "len_period": self.len_period, "len_trend": self.len_trend,
            "channels_hidden": self.channels_hidden,
            "residual_units": self.residual_units,
            "external_hidden": self.external_hidden,
            "seed": self.seed, "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class ResidualUnit:
    """Pre-activation residual unit: x + conv(relu(bn(conv(relu(bn(x))))))."""

    def __init__(self, channels: int, kernel_size: int, rng, dtype):
        self.bn1 = BatchNorm(channels, dtype=dtype)
        self.relu1 = ReLU()
        self.conv1 = Conv2D(channels, channels, kernel_size, rng, dtype)
        self.bn2 = BatchNorm(channels, dtype=dtype)
        self.relu2 = ReLU()
        self.conv2 = Conv2D(channels, channels, kernel_size, rng, dtype)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        h = self.bn1.forward(x, train)
        h = self.relu1.forward(h)
        h = self.conv1.forward(h)
        h = self.bn2.forward(h, train)
        h = self.relu2.forward(h)
        h = self.conv2.forward(h)
        return x + h

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = self.conv2.backward(dy)
        dh = self.relu2.backward(dh)
        dh = self.bn2.backward(dh)
        dh = self.conv1.backward(dh)
        dh = self.relu1.backward(dh)
        dh = self.bn1.backward(dh)
        return dy + dh

    def sublayers(self) -> dict[str, object]:
        return {"bn1": self.bn1, "conv1": self.conv1, "bn2": self.bn2,
                "conv2": self.conv2}


class Branch:
    """One lag family: input conv -> residual units -> single-channel output."""

    def __init__(self, in_channels: int, cfg: NetworkConfig, rng):
        dtype = cfg.np_dtype
        k = cfg.kernel_size
        c = cfg.channels_hidden
        self.in_conv = Conv2D(in_channels, c, k, rng, dtype)
        self.units = [ResidualUnit(c, k, rng, dtype) for _ in range(cfg.residual_units)]
        # zero-initialized so an untrained branch contributes nothing
        self.out_conv = Conv2D(c, 1, k, rng, dtype, zero_init=True)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        h = self.in_conv.forward(x)
        for unit in self.units:
            h = unit.forward(h, train)
        return self.out_conv.forward(h)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = self.out_conv.backward(dy)
        for unit in reversed(self.units):
            dh = unit.backward(dh)
        return self.in_conv.backward(dh)

    def sublayers(self) -> dict[str, object]:
        out = {"in_conv": self.in_conv}
        for i, unit in enumerate(self.units):
            for name, layer in unit.sublayers().items():
                out[f"unit{i}.{name}"] = layer
        out["out_conv"] = self.out_conv
        return out


class Model:
    """Full parameter set of one network variant plus optimizer state and scale."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        dtype = config.np_dtype
        rng = np.random.default_rng(config.seed)
        self.branches: dict[str, Branch] = {}
        for name in BRANCH_ORDER:
            length = config.branch_lengths[name]
            if length > 0:
                self.branches[name] = Branch(length, config, rng)
        self.fusion: dict[str, np.ndarray] = {
            name: np.ones((config.rows, config.cols), dtype=dtype)
            for name in self.branches
        }
        self.ext_dense1 = Dense(config.external_size, config.external_hidden, rng, dtype)
        self.ext_relu = ReLU()
        self.ext_dense2 = Dense(config.external_hidden, config.rows * config.cols,
                                rng, dtype)
        # value scale of the targets, recorded at training time
        self.scale: Optional[tuple[float, float]] = None
        # Adam state
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t: int = 0
        self.history: list[dict] = []
        self._cache = None

    # ---- parameter registry -------------------------------------------------

    def named_parameters(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for bname, branch in self.branches.items():
            for lname, layer in branch.sublayers().items():
                for pname, arr in layer.params().items():
                    out[f"{bname}.{lname}.{pname}"] = arr
        for bname in self.branches:
            out[f"fusion.{bname}"] = self.fusion[bname]
        for dname, layer in (("dense1", self.ext_dense1), ("dense2", self.ext_dense2)):
            for pname, arr in layer.params().items():
                out[f"external.{dname}.{pname}"] = arr
        return out

    def named_state(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for bname, branch in self.branches.items():
            for lname, layer in branch.sublayers().items():
                if isinstance(layer, BatchNorm):
                    for sname, arr in layer.state().items():
                        out[f"{bname}.{lname}.{sname}"] = arr
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        target = self.named_parameters()[name]
        if target.shape != value.shape:
            raise ValueError(f"shape mismatch for {name}: {target.shape} vs {value.shape}")
        target[...] = value

    # ---- forward / backward -------------------------------------------------

    def _branch_inputs(self, batch) -> dict[str, np.ndarray]:
        # stacks arrive channels-first (n, L, H, W); layers run channels-last
        stacks = {"nearby": batch.nearby, "period": batch.period, "trend": batch.trend}
        dtype = self.config.np_dtype
        return {name: np.ascontiguousarray(
                    np.asarray(stacks[name]).transpose(0, 2, 3, 1), dtype=dtype)
                for name in self.branches}

    def forward_batch(self, batch, train: bool) -> np.ndarray:
        """Predict (B, H, W) frames for a SampleBatch-like object."""
        cfg = self.config
        inputs = self._branch_inputs(batch)
        external = np.ascontiguousarray(batch.external, dtype=cfg.np_dtype)
        if external.shape[1] != cfg.external_size:
            raise ValueError(
                f"external vector length {external.shape[1]} != config "
                f"{cfg.external_size}")
        b = external.shape[0]
        hw = (cfg.rows, cfg.cols)

        branch_out: dict[str, np.ndarray] = {}
        fused = np.zeros((b, *hw), dtype=cfg.np_dtype)
        for name, branch in self.branches.items():
            x = inputs[name]
            if x.shape[1:3] != hw:
                raise ValueError(f"{name} stack frames {x.shape[1:3]} != grid {hw}")
            out = branch.forward(x, train)[..., 0]
            branch_out[name] = out
            fused += self.fusion[name] * out

        h = self.ext_dense1.forward(external)
        h = self.ext_relu.forward(h)
        ext_map = self.ext_dense2.forward(h).reshape(b, *hw)

        pre = fused + ext_map
        out = np.tanh(pre)
        self._cache = (branch_out, out)
        return out

    def backward(self, dout: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        """Gradients of a scalar loss given d(loss)/d(prediction)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward_batch")
        branch_out, out = self._cache
        self._cache = None
        b = out.shape[0]
        dpre = (dout * (1.0 - out * out)).astype(out.dtype, copy=False)

        dext = self.ext_dense2.backward(dpre.reshape(b, -1))
        dext = self.ext_relu.backward(dext)
        self.ext_dense1.backward(dext)

        fusion_grads = {}
        for name, branch in self.branches.items():
            fusion_grads[name] = (dpre * branch_out[name]).sum(axis=0)
            dbranch = (dpre * self.fusion[name])[..., None]
            branch.backward(dbranch)

        grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for bname, branch in self.branches.items():
            for lname, layer in branch.sublayers().items():
                for pname, g in layer.grads.items():
                    grads[f"{bname}.{lname}.{pname}"] = g
        for bname in self.branches:
            grads[f"fusion.{bname}"] = fusion_grads[bname]
        for dname, layer in (("dense1", self.ext_dense1), ("dense2", self.ext_dense2)):
            for pname, g in layer.grads.items():
                grads[f"external.{dname}.{pname}"] = g
        return grads

    def loss_and_grads(self, batch, train: bool = True):
        pred = self.forward_batch(batch, train)
        target = np.ascontiguousarray(batch.target, dtype=self.config.np_dtype)
        loss, dpred = mse_loss(pred, target)
        return loss, self.backward(dpred)

    def snapshot(self) -> dict[str, np.ndarray]:
        params = {k: v.copy() for k, v in self.named_parameters().items()}
        params.update({f"state.{k}": v.copy() for k, v in self.named_state().items()})
        return params

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        state = self.named_state()
        for name, value in snap.items():
            if name.startswith("state."):
                state[name[len("state."):]][...] = value
            else:
                self.set_parameter(name, value)


def forward(model: Model, sample, mode: str = "eval") -> np.ndarray:
    """Single-sample prediction (H, W). Train mode requires a real batch."""
    from ..features import SampleBatch

    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    batch = SampleBatch.from_samples([sample], dtype=model.config.np_dtype)
    return model.forward_batch(batch, train=(mode == "train"))[0]


def param_count(config: NetworkConfig) -> int:
    """Exact number of trainable scalars (running statistics excluded)."""
    k2 = config.kernel_size ** 2
    c = config.channels_hidden
    hw = config.rows * config.cols
    total = 0
    n_branches = 0
    for length in config.branch_lengths.values():
        if length == 0:
            continue
        n_branches += 1
        total += c * length * k2 + c                       # input conv
        total += config.residual_units * (4 * c + 2 * (c * c * k2 + c))
        total += c * k2 + 1                                # output conv
    total += n_branches * hw                               # fusion matrices
    total += config.external_size * config.external_hidden + config.external_hidden
    total += config.external_hidden * hw + hw
    return total
