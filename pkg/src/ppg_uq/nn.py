"""Layers and the two network architectures.

* :func:`build_conv_classifier` -- five conv blocks (kernel 8, LeakyReLU 0.01,
  dropout, maxpool 2/2) with 128-64-32-16-1 maps and a 4-output linear head
  ``[f_0, f_1, log s2_0, log s2_1]``.
* :func:`build_resnet1d` -- stem conv (k7, s2, 64 maps) + 8 residual blocks
  (k9, strides 1/2) with 64-64-128-128-256-256-1-1 maps, adaptive average
  pooling to 100 bins and a Softplus 4-output head ``[mu_sbp, mu_dbp, s2_sbp, s2_dbp]``.

``ModelConfig.width`` scales every channel count except the final single-map
layers; ``width=1`` is the published schedule.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .checkpoint import ParamNameMismatchError
from .rng import RngStream
from .tensor import Tensor

CLASSIFIER_CHANNELS = (128, 64, 32, 16, 1)
CLASSIFIER_KERNEL = 8
RESNET_STEM_CHANNELS = 64
RESNET_CHANNELS = (64, 64, 128, 128, 256, 256, 1, 1)
RESNET_KERNEL = 9
RESNET_POOL_BINS = 100
DEFAULT_LENGTH = {"classification": 800, "regression": 1250}


class ParamSet:
    """Ordered, uniquely named collection of tensors."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._items: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._items[name] = tensor

    def items(self):
        return self._items.items()

    def names(self) -> list[str]:
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self._items.values()]

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    def count(self) -> int:
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None


@dataclass(frozen=True)
class ModelConfig:
    task: str = "classification"
    dropout_rate: float = 0.05
    batchnorm_enabled: bool = True
    head_count: int = 4
    input_length: int | None = None
    width: float = 1.0
    output_scale: float = 1.0

    def __post_init__(self):
        if self.task not in DEFAULT_LENGTH:
            raise ValueError(f"task must be 'classification' or 'regression', got {self.task!r}")
        if self.head_count != 4:
            raise ValueError(f"{self.task} models have exactly 4 head outputs, got head_count={self.head_count}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.width <= 0:
            raise ValueError(f"width must be positive, got {self.width}")
        if self.output_scale <= 0:
            raise ValueError(f"output_scale must be positive, got {self.output_scale}")

    @property
    def length(self) -> int:
        return self.input_length if self.input_length is not None else DEFAULT_LENGTH[self.task]


class Module:
    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._buffers: OrderedDict[str, Tensor] = OrderedDict()
        self._modules: OrderedDict[str, Module] = OrderedDict()
        self.training = True
        self.mc_dropout = False

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value)
        self._buffers[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def _walk(self, prefix: str, buffers: bool):
        for name, t in self._params.items():
            yield prefix + name, t
        if buffers:
            for name, t in self._buffers.items():
                yield prefix + name, t
        for name, m in self._modules.items():
            yield from m._walk(f"{prefix}{name}.", buffers)

    def parameters(self) -> ParamSet:
        """Trainable tensors only."""
        return ParamSet(self._walk("", buffers=False))

    def state(self) -> ParamSet:
        """Trainable tensors plus batchnorm running statistics."""
        return ParamSet(self._walk("", buffers=True))

    def load_state(self, state: ParamSet) -> None:
        own = self.state()
        if own.names() != state.names():
            missing = sorted(set(own.names()) - set(state.names()))
            extra = sorted(set(state.names()) - set(own.names()))
            raise ParamNameMismatchError(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in own:
            src = state[name].data
            if src.shape != t.shape:
                raise ParamNameMismatchError(f"{name}: stored shape {src.shape} != model shape {t.shape}")
        for name, t in own:
            np.copyto(t.data, state[name].data)

    def _set(self, attr: str, value: bool) -> None:
        setattr(self, attr, value)
        for m in self._modules.values():
            m._set(attr, value)

    def train(self, mode: bool = True) -> "Module":
        self._set("training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_mc_dropout(self, active: bool) -> "Module":
        """Keep dropout stochastic while in eval mode (MC dropout sampling)."""
        self._set("mc_dropout", active)
        return self

    def __call__(self, x: Tensor, rng: RngStream | None = None) -> Tensor:
        return self.forward(T.as_tensor(x), rng)

    def forward(self, x: Tensor, rng: RngStream | None) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


def _fan_in_uniform(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound)


def _he_uniform(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    """Variance 2/fan_in, which keeps activation scale roughly constant through (leaky) ReLU stacks."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(shape, -bound, bound)


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: RngStream, stride: int = 1, padding: int = 0,
                 gain_init: bool = False):
        super().__init__()
        self.stride, self.padding, self.kernel = stride, padding, kernel
        fan_in = cin * kernel
        init = _he_uniform if gain_init else _fan_in_uniform
        self.weight = self.add_param("weight", init(rng, (cout, cin, kernel), fan_in))
        self.bias = self.add_param("bias", _fan_in_uniform(rng, (cout,), fan_in))

    def forward(self, x, rng=None):
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: RngStream):
        super().__init__()
        self.weight = self.add_param("weight", _fan_in_uniform(rng, (fin, fout), fin))
        self.bias = self.add_param("bias", _fan_in_uniform(rng, (fout,), fin))

    def forward(self, x, rng=None):
        return T.matmul(x, self.weight) + self.bias


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.add_param("gamma", np.ones(channels, np.float32))
        self.beta = self.add_param("beta", np.zeros(channels, np.float32))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, np.float32))
        self.running_var = self.add_buffer("running_var", np.ones(channels, np.float32))

    def forward(self, x, rng=None):
        return T.batchnorm1d(x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
                             self.training, self.momentum, self.eps)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, rng=None):
        return T.dropout(x, self.rate, rng, active=self.training or self.mc_dropout)


def _bn_or_identity(enabled: bool, channels: int) -> Module | None:
    return BatchNorm1d(channels) if enabled else None


def _scaled(channels: int, width: float) -> int:
    return channels if channels == 1 else max(1, int(round(channels * width)))


class ConvClassifier(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        self.cfg = cfg
        length = cfg.length
        cin = 1
        self.blocks: list[tuple[Conv1d, Dropout]] = []
        for i, ch in enumerate(CLASSIFIER_CHANNELS):
            ch = _scaled(ch, cfg.width)
            conv_len = T.conv_output_length(length, CLASSIFIER_KERNEL)
            length = T.conv_output_length(conv_len, 2, 2) if conv_len >= 2 else 0
            if length < 1:
                raise ValueError(
                    f"input length {cfg.length} too short for five conv(k={CLASSIFIER_KERNEL}) + maxpool(2) stages"
                )
            # no normalisation layers here, so use the ReLU-gain bound to keep the signal alive
            conv = self.add_module(f"conv{i}", Conv1d(cin, ch, CLASSIFIER_KERNEL, rng, gain_init=True))
            self.blocks.append((conv, self.add_module(f"drop{i}", Dropout(cfg.dropout_rate))))
            cin = ch
        self.flat_features = cin * length
        self.head = self.add_module("head", Linear(self.flat_features, 4, rng))

    def forward(self, x, rng=None):
        if x.ndim != 3 or x.shape[1:] != (1, self.cfg.length):
            raise T.ShapeError(f"classifier expects (batch, 1, {self.cfg.length}) input, got {x.shape}")
        h = x
        for conv, drop in self.blocks:
            h = T.maxpool1d(drop(T.leaky_relu(conv(h), 0.01), rng), 2, 2)
        h = h.reshape(h.shape[0], self.flat_features)
        return self.head(h)


class ResidualBlock(Module):
    def __init__(self, cin: int, cout: int, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        pad = RESNET_KERNEL // 2
        self.conv1 = self.add_module("conv1", Conv1d(cin, cout, RESNET_KERNEL, rng, stride=1, padding=pad))
        self.bn1 = _bn_or_identity(cfg.batchnorm_enabled, cout)
        if self.bn1 is not None:
            self.add_module("bn1", self.bn1)
        self.drop1 = self.add_module("drop1", Dropout(cfg.dropout_rate))
        self.conv2 = self.add_module("conv2", Conv1d(cout, cout, RESNET_KERNEL, rng, stride=2, padding=pad))
        self.bn2 = _bn_or_identity(cfg.batchnorm_enabled, cout)
        if self.bn2 is not None:
            self.add_module("bn2", self.bn2)
        self.drop2 = self.add_module("drop2", Dropout(cfg.dropout_rate))
        # equal widths: strided subsampling; otherwise a 1x1 stride-2 projection
        self.down = None if cin == cout else self.add_module("down", Conv1d(cin, cout, 1, rng, stride=2))

    def forward(self, x, rng=None):
        h = self.conv1(x)
        if self.bn1 is not None:
            h = self.bn1(h)
        h = T.relu(self.drop1(h, rng))
        h = self.conv2(h)
        if self.bn2 is not None:
            h = self.bn2(h)
        h = self.drop2(h, rng)
        skip = x[:, :, ::2] if self.down is None else self.down(x)
        return T.relu(h + skip)


class ResNet1d(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        self.cfg = cfg
        length = cfg.length
        if length < 7:
            raise ValueError(f"input length {length} too short for the k=7 stem convolution")
        c0 = _scaled(RESNET_STEM_CHANNELS, cfg.width)
        self.stem = self.add_module("stem", Conv1d(1, c0, 7, rng, stride=2, padding=3))
        self.stem_bn = _bn_or_identity(cfg.batchnorm_enabled, c0)
        if self.stem_bn is not None:
            self.add_module("stem_bn", self.stem_bn)
        self.stem_drop = self.add_module("stem_drop", Dropout(cfg.dropout_rate))
        length = T.conv_output_length(T.conv_output_length(length, 7, 2, 3), 3, 2, 1)
        if length < 1:
            raise ValueError(f"input length {cfg.length} too short for the stem")
        self.blocks: list[ResidualBlock] = []
        cin = c0
        for i, ch in enumerate(RESNET_CHANNELS):
            ch = _scaled(ch, cfg.width)
            self.blocks.append(self.add_module(f"block{i}", ResidualBlock(cin, ch, cfg, rng)))
            cin = ch
        self.final_channels = cin
        self.head = self.add_module("head", Linear(cin * RESNET_POOL_BINS, 4, rng))

    def forward(self, x, rng=None):
        if x.ndim != 3 or x.shape[1:] != (1, self.cfg.length):
            raise T.ShapeError(f"resnet expects (batch, 1, {self.cfg.length}) input, got {x.shape}")
        h = self.stem(x)
        if self.stem_bn is not None:
            h = self.stem_bn(h)
        h = T.relu(self.stem_drop(h, rng))
        h = T.maxpool1d(h, 3, 2, padding=1)
        for block in self.blocks:
            h = block(h, rng)
        h = T.adaptive_avgpool1d(h, RESNET_POOL_BINS)
        h = h.reshape(h.shape[0], self.final_channels * RESNET_POOL_BINS)
        out = T.softplus(self.head(h))
        s = self.cfg.output_scale
        if s != 1.0:
            out = out * np.float32(s)
        return out


def build_conv_classifier(cfg: ModelConfig, rng: RngStream | None = None) -> ConvClassifier:
    if cfg.task != "classification":
        raise ValueError("build_conv_classifier needs a classification ModelConfig")
    return ConvClassifier(cfg, rng or RngStream(0, "init"))


def build_resnet1d(cfg: ModelConfig, rng: RngStream | None = None) -> ResNet1d:
    if cfg.task != "regression":
        raise ValueError("build_resnet1d needs a regression ModelConfig")
    return ResNet1d(cfg, rng or RngStream(0, "init"))


def build_model(cfg: ModelConfig, rng: RngStream | None = None) -> Module:
    return build_conv_classifier(cfg, rng) if cfg.task == "classification" else build_resnet1d(cfg, rng)
