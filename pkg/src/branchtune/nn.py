"""Layers, the small residual backbone, freeze strategies, and SGD.

The backbone is NCHW throughout: a 3x3 stem, stages of residual blocks
(two 3x3 convs each; the first block of a later stage downsamples with
stride 2 and a 1x1 skip conv), an optional 1x1 projection conv when the
embedding width differs from the last stage width, global average
pooling, and a two-layer MLP projector used only by the self-supervised
losses.  Convolutions are bias-free; batch norm provides the shift.

A frozen batch-norm layer stops updating its affine parameters *and*
its running statistics, and always normalizes with the running
statistics, in training mode too.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class BuildError(ValueError):
    """Raised when a backbone description is inconsistent."""


# -- layers ------------------------------------------------------------------


class ConvLayer:
    """Bias-free 2-D convolution with a stable name."""

    def __init__(self, name: str, weight: Tensor, stride: int = 1,
                 padding=(0, 0)):
        self.name = name
        self.weight = weight
        self.stride = stride
        self.padding = tuple(padding)

    @classmethod
    def he_init(cls, name: str, out_ch: int, in_ch: int, kh: int, kw: int,
                rng: np.random.Generator, stride: int = 1, padding=(0, 0),
                dtype=np.float32) -> "ConvLayer":
        fan_in = in_ch * kh * kw
        w = rng.standard_normal((out_ch, in_ch, kh, kw), dtype=dtype)
        w *= np.sqrt(2.0 / fan_in).astype(dtype)
        return cls(name, Tensor(w, requires_grad=True), stride, padding)

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.weight.requires_grad = bool(flag)

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride,
                        padding=self.padding)


class BnLayer:
    """Per-channel batch normalization over NCHW activations.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running statistics with the same batch values; frozen or
    eval mode normalizes with the running statistics and leaves them
    untouched.
    """

    def __init__(self, name: str, channels: int, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float32):
        self.name = name
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, flag: bool) -> None:
        self._frozen = bool(flag)
        self.gamma.requires_grad = not self._frozen
        self.beta.requires_grad = not self._frozen

    def forward(self, x: Tensor, train: bool) -> Tensor:
        c = self.channels
        gamma = self.gamma.reshape(1, c, 1, 1)
        beta = self.beta.reshape(1, c, 1, 1)
        if train and not self._frozen:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            xhat = centered * ((var + self.eps) ** -0.5)
            m = self.momentum
            self.running_mean.data[...] = ((1 - m) * self.running_mean.data
                                           + m * mu.data.reshape(c))
            self.running_var.data[...] = ((1 - m) * self.running_var.data
                                          + m * var.data.reshape(c))
        else:
            rm = Tensor(self.running_mean.data.reshape(1, c, 1, 1))
            rv = Tensor(self.running_var.data.reshape(1, c, 1, 1))
            xhat = (x - rm) * ((rv + self.eps) ** -0.5)
        return gamma * xhat + beta


class LinearLayer:
    def __init__(self, name: str, weight: Tensor, bias: Tensor):
        self.name = name
        self.weight = weight  # (out, in)
        self.bias = bias

    @classmethod
    def he_init(cls, name: str, out_dim: int, in_dim: int,
                rng: np.random.Generator, dtype=np.float32) -> "LinearLayer":
        w = rng.standard_normal((out_dim, in_dim), dtype=dtype)
        w *= np.sqrt(2.0 / in_dim).astype(dtype)
        b = np.zeros(out_dim, dtype=dtype)
        return cls(name, Tensor(w, requires_grad=True),
                   Tensor(b, requires_grad=True))

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.weight.requires_grad = bool(flag)
        self.bias.requires_grad = bool(flag)

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight.T) + self.bias


class ResidualBlock:
    """Two 3x3 convs with pre-activation-free joins: relu(main(x) + skip(x)).

    With the final conv (and its fresh bn) at zero the block reduces to
    relu(skip(x)) exactly.
    """

    def __init__(self, name: str, conv1: ConvLayer, bn1: BnLayer,
                 conv2: ConvLayer, bn2: BnLayer,
                 down_conv: ConvLayer | None = None,
                 down_bn: BnLayer | None = None):
        self.name = name
        self.conv1 = conv1
        self.bn1 = bn1
        self.conv2 = conv2
        self.bn2 = bn2
        self.down_conv = down_conv
        self.down_bn = down_bn

    def forward(self, x: Tensor, train: bool, taps: dict | None) -> Tensor:
        h = self.conv1.forward(x)
        _tap(taps, self.conv1.name, h)
        h = self.bn1.forward(h, train)
        _tap(taps, self.bn1.name, h)
        h = T.relu(h)
        h = self.conv2.forward(h)
        _tap(taps, self.conv2.name, h)
        h = self.bn2.forward(h, train)
        _tap(taps, self.bn2.name, h)
        if self.down_conv is not None:
            s = self.down_conv.forward(x)
            _tap(taps, self.down_conv.name, s)
            s = self.down_bn.forward(s, train)
            _tap(taps, self.down_bn.name, s)
        else:
            s = x
        out = T.relu(h + s)
        _tap(taps, self.name, out)
        return out


class Projector:
    """Two-layer MLP head used only during self-supervised training."""

    def __init__(self, fc1: LinearLayer, fc2: LinearLayer):
        self.fc1 = fc1
        self.fc2 = fc2

    @property
    def trainable(self) -> bool:
        return self.fc1.trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.fc1.trainable = flag
        self.fc2.trainable = flag

    def forward(self, z: Tensor) -> Tensor:
        return self.fc2.forward(T.relu(self.fc1.forward(z)))


def _tap(taps: dict | None, name: str, value: Tensor) -> None:
    if taps is not None:
        taps[name] = np.array(value.data, copy=True)


# -- backbone description ----------------------------------------------------


@dataclass(frozen=True)
class BackboneSpec:
    """Widths and depths of the toy backbone; defaults give the standard one."""

    stage_widths: tuple[int, ...] = (8, 16)
    blocks_per_stage: tuple[int, ...] = (1, 1)
    in_channels: int = 3
    input_size: int = 32
    embed_dim: int = 32
    proj_hidden: int | None = None  # defaults to 2 * embed_dim
    proj_out: int | None = None     # defaults to embed_dim

    def resolved_proj_hidden(self) -> int:
        return self.proj_hidden if self.proj_hidden is not None else 2 * self.embed_dim

    def resolved_proj_out(self) -> int:
        return self.proj_out if self.proj_out is not None else self.embed_dim

    def validate(self) -> None:
        if len(self.stage_widths) == 0:
            raise BuildError("at least one stage is required")
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise BuildError(
                f"{len(self.stage_widths)} stage widths but "
                f"{len(self.blocks_per_stage)} block counts")
        dims = (*self.stage_widths, *self.blocks_per_stage, self.in_channels,
                self.embed_dim, self.resolved_proj_hidden(),
                self.resolved_proj_out())
        if any(int(d) != d or d <= 0 for d in dims):
            raise BuildError(f"all dimensions must be positive integers: {self}")
        if self.input_size < 4:
            raise BuildError(f"input_size {self.input_size} is too small")


class Model:
    """Encoder plus projector, with stable layer names for taps/checkpoints."""

    def __init__(self, spec: BackboneSpec, stem_conv: ConvLayer,
                 stem_bn: BnLayer, blocks: list[ResidualBlock],
                 embed_conv: ConvLayer | None, projector: Projector):
        self.spec = spec
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.blocks = blocks
        self.embed_conv = embed_conv
        self.projector = projector

    # -- forward -------------------------------------------------------------

    def forward(self, x: Tensor, train: bool = True,
                capture: bool = False):
        """Run the network; returns (embedding, projection, taps).

        ``taps`` is None unless ``capture``; captured activations are
        detached numpy copies keyed by layer name, one per conv, bn, and
        residual-block output.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        s = self.spec
        expected = (s.in_channels, s.input_size, s.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise T.ShapeError(
                f"expected input NCHW with CHW={expected}, got {x.shape}")
        taps: dict | None = {} if capture else None
        h = self.stem_conv.forward(x)
        _tap(taps, self.stem_conv.name, h)
        h = self.stem_bn.forward(h, train)
        _tap(taps, self.stem_bn.name, h)
        h = T.relu(h)
        for block in self.blocks:
            h = block.forward(h, train, taps)
        if self.embed_conv is not None:
            h = self.embed_conv.forward(h)
            _tap(taps, self.embed_conv.name, h)
        z = T.global_avg_pool(h)
        proj = self.projector.forward(z)
        return z, proj, taps

    def embed(self, x, train: bool = False) -> np.ndarray:
        """Detached embeddings for probing and profiling."""
        with T.no_grad():
            z, _, _ = self.forward(x, train=train)
        return np.array(z.data, copy=True)

    # -- enumeration ---------------------------------------------------------

    def conv_slots(self) -> list[tuple[object, str]]:
        """(owner, attribute) pairs for every conv position, in order."""
        slots: list[tuple[object, str]] = [(self, "stem_conv")]
        for block in self.blocks:
            slots.append((block, "conv1"))
            slots.append((block, "conv2"))
            if block.down_conv is not None:
                slots.append((block, "down_conv"))
        if self.embed_conv is not None:
            slots.append((self, "embed_conv"))
        return slots

    def conv_layers(self) -> list:
        return [getattr(owner, attr) for owner, attr in self.conv_slots()]

    def bn_layers(self) -> list[BnLayer]:
        layers = [self.stem_bn]
        for block in self.blocks:
            layers.extend([block.bn1, block.bn2])
            if block.down_bn is not None:
                layers.append(block.down_bn)
        return layers

    def tap_names(self) -> list[str]:
        names = [self.stem_conv.name, self.stem_bn.name]
        for b in self.blocks:
            names.extend([b.conv1.name, b.bn1.name, b.conv2.name, b.bn2.name])
            if b.down_conv is not None:
                names.extend([b.down_conv.name, b.down_bn.name])
            names.append(b.name)
        if self.embed_conv is not None:
            names.append(self.embed_conv.name)
        return names

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable-eligible tensors (weights and bn affine), stable order."""
        out: list[tuple[str, Tensor]] = []
        for conv in self.conv_layers():
            if hasattr(conv, "branch"):  # expanded slot: host plus branch
                out.append((f"{conv.base.name}.weight", conv.base.weight))
                out.append((f"{conv.branch.name}.weight", conv.branch.weight))
            else:
                out.append((f"{conv.name}.weight", conv.weight))
        for bn in self.bn_layers():
            out.append((f"{bn.name}.gamma", bn.gamma))
            out.append((f"{bn.name}.beta", bn.beta))
        for fc in (self.projector.fc1, self.projector.fc2):
            out.append((f"{fc.name}.weight", fc.weight))
            out.append((f"{fc.name}.bias", fc.bias))
        return out

    def named_state(self) -> list[tuple[str, Tensor]]:
        """Parameters plus bn running statistics; the checkpointed state."""
        out = self.named_parameters()
        for bn in self.bn_layers():
            out.append((f"{bn.name}.running_mean", bn.running_mean))
            out.append((f"{bn.name}.running_var", bn.running_var))
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def clone(self) -> "Model":
        """Independent deep copy; gradients are not carried over."""
        dup = copy.deepcopy(self)
        for _, p in dup.named_state():
            p.grad = None
        return dup


def build_backbone(spec: BackboneSpec, seed: int) -> Model:
    """Deterministically initialize a backbone from its description.

    Conv and linear weights use He fan-in scaling from a generator seeded
    with ``seed``; bn starts at identity with zero-mean/unit-var running
    statistics.  Two builds with the same spec and seed are bitwise equal.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    stem_conv = ConvLayer.he_init("stem.conv", spec.stage_widths[0],
                                  spec.in_channels, 3, 3, rng,
                                  stride=1, padding=(1, 1))
    stem_bn = BnLayer("stem.bn", spec.stage_widths[0])
    blocks: list[ResidualBlock] = []
    in_ch = spec.stage_widths[0]
    for si, (width, depth) in enumerate(zip(spec.stage_widths,
                                            spec.blocks_per_stage), start=1):
        for bi in range(1, depth + 1):
            prefix = f"stage{si}.block{bi}"
            stride = 2 if (si > 1 and bi == 1) else 1
            conv1 = ConvLayer.he_init(f"{prefix}.conv1", width, in_ch, 3, 3,
                                      rng, stride=stride, padding=(1, 1))
            bn1 = BnLayer(f"{prefix}.bn1", width)
            conv2 = ConvLayer.he_init(f"{prefix}.conv2", width, width, 3, 3,
                                      rng, stride=1, padding=(1, 1))
            bn2 = BnLayer(f"{prefix}.bn2", width)
            down_conv = down_bn = None
            if stride != 1 or in_ch != width:
                down_conv = ConvLayer.he_init(f"{prefix}.down.conv", width,
                                              in_ch, 1, 1, rng, stride=stride,
                                              padding=(0, 0))
                down_bn = BnLayer(f"{prefix}.down.bn", width)
            blocks.append(ResidualBlock(prefix, conv1, bn1, conv2, bn2,
                                        down_conv, down_bn))
            in_ch = width
    embed_conv = None
    if spec.embed_dim != in_ch:
        embed_conv = ConvLayer.he_init("embed.conv", spec.embed_dim, in_ch,
                                       1, 1, rng, stride=1, padding=(0, 0))
    hidden = spec.resolved_proj_hidden()
    fc1 = LinearLayer.he_init("projector.fc1", hidden, spec.embed_dim, rng)
    fc2 = LinearLayer.he_init("projector.fc2", spec.resolved_proj_out(),
                              hidden, rng)
    return Model(spec, stem_conv, stem_bn, blocks, embed_conv,
                 Projector(fc1, fc2))


# -- freeze strategies -------------------------------------------------------


class Strategy(Enum):
    """Which parameter families adapt during a training stage.

    The conv axis also governs the 1x1 embedding conv; the projector is
    trainable under every strategy except FIXED_ALL (it never carries
    task knowledge and is discarded after training).
    """

    FIXED_ALL = "FixedAll"
    FINE_TUNE_ALL = "FineTuneAll"
    FIX_CONV_FIX_BN = "FixConv_FixBN"
    FIX_CONV_TUNE_BN = "FixConv_TuneBN"
    TUNE_CONV_TUNE_BN = "TuneConv_TuneBN"
    TUNE_CONV_FIX_BN = "TuneConv_FixBN"


_STRATEGY_TABLE = {
    # (convs trainable, bn trainable, projector trainable)
    Strategy.FIXED_ALL: (False, False, False),
    Strategy.FINE_TUNE_ALL: (True, True, True),
    Strategy.FIX_CONV_FIX_BN: (False, False, True),
    Strategy.FIX_CONV_TUNE_BN: (False, True, True),
    Strategy.TUNE_CONV_TUNE_BN: (True, True, True),
    Strategy.TUNE_CONV_FIX_BN: (True, False, True),
}


def set_strategy(model: Model, strategy: Strategy) -> None:
    """Apply a freeze strategy to every layer of a plain (unexpanded) model."""
    conv_on, bn_on, proj_on = _STRATEGY_TABLE[strategy]
    for conv in model.conv_layers():
        if not isinstance(conv, ConvLayer):
            raise TypeError(
                f"set_strategy expects a plain model; {conv!r} at slot "
                f"{getattr(conv, 'name', '?')} is not a conv layer")
        conv.trainable = conv_on
    for bn in model.bn_layers():
        bn.frozen = not bn_on
    model.projector.trainable = proj_on


# -- optimizer ---------------------------------------------------------------


class SGD:
    """Momentum SGD with decoupled-from-nothing classic L2 weight decay.

    step() applies  v <- momentum*v + grad + weight_decay*p ;
    p <- p - lr*v.  Parameters that are frozen or have no gradient are
    left bitwise untouched, velocity included.
    """

    def __init__(self, params: Sequence[Tensor], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0 or momentum < 0 or weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be >= 0")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        T.zero_grads(self.params)

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v
