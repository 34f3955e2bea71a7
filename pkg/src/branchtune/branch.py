"""Branch expansion and exact branch compression for conv layers.

Expansion pairs every convolution with a slim, zero-initialized branch
conv computed on the same input; the host path is wrapped in a
stop-gradient so only the branch (and whatever is explicitly left
unfrozen) learns.  Because convolution is linear in its kernel,

    conv(x, w) + conv(x, w') = conv(x, w + pad(w'))

whenever the branch kernel is zero-padded to the host kernel's extent
and the branch padding offsets the extent difference.  Compression uses
exactly that identity to fold the trained branch back into the host
kernel, restoring the original architecture with no approximation.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import nn
from . import tensor as T
from .nn import ConvLayer, Model
from .tensor import Tensor


class BranchShape(Enum):
    """Kernel extent of the trainable branch, rows x columns."""

    K1X1 = (1, 1)
    K1X3 = (1, 3)  # one row high, three columns wide
    K3X3 = (3, 3)

    @property
    def extent(self) -> tuple[int, int]:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "BranchShape":
        table = {"1x1": cls.K1X1, "1x3": cls.K1X3, "3x3": cls.K3X3}
        key = text.strip().lower()
        if key not in table:
            raise ValueError(f"unknown branch shape {text!r}; "
                             f"expected one of {sorted(table)}")
        return table[key]


def branch_geometry(base: ConvLayer, shape: BranchShape):
    """Kernel extent and padding for a branch attached to ``base``.

    The branch is clipped to the host kernel per dimension and its
    padding is reduced by half the extent difference, which keeps the
    output grid identical for any stride.  Requires even extent
    differences and non-negative resulting padding.
    """
    kh, kw = base.kernel_size
    bh, bw = (min(shape.extent[0], kh), min(shape.extent[1], kw))
    dh, dw = kh - bh, kw - bw
    if dh % 2 or dw % 2:
        raise ValueError(
            f"branch {bh}x{bw} cannot be centered in host kernel {kh}x{kw}")
    ph = base.padding[0] - dh // 2
    pw = base.padding[1] - dw // 2
    if ph < 0 or pw < 0:
        raise ValueError(
            f"host padding {base.padding} too small to offset branch "
            f"{bh}x{bw} inside {kh}x{kw}")
    return bh, bw, (ph, pw)


class BranchConv:
    """A frozen host conv plus a trainable zero-initialized branch conv.

    Forward is stop_gradient(host(x)) + branch(x): values equal the sum
    of both paths while gradients reach only the branch kernel.
    """

    def __init__(self, base: ConvLayer, branch: ConvLayer):
        if base.weight.shape[0] != branch.weight.shape[0] or \
           base.weight.shape[1] != branch.weight.shape[1]:
            raise T.ShapeError(
                f"branch channels {branch.weight.shape[:2]} do not match "
                f"host channels {base.weight.shape[:2]}")
        if branch.stride != base.stride:
            raise ValueError("branch must copy the host stride")
        self.base = base
        self.branch = branch
        self.name = base.name

    @property
    def trainable(self) -> bool:
        return self.branch.trainable

    def forward(self, x: Tensor) -> Tensor:
        host = T.stop_gradient(self.base.forward(x))
        return host + self.branch.forward(x)


def expand(model: Model, shape: BranchShape, fix_bn: bool = True) -> Model:
    """Attach a zero branch to every conv of a copy of ``model``.

    The input model is left untouched.  In the returned model every host
    conv is frozen, batch-norm layers are frozen when ``fix_bn``, and the
    projector stays trainable.  Since the branches start at zero the
    returned model computes exactly the same function as ``model``.
    """
    out = model.clone()
    for owner, attr in out.conv_slots():
        conv = getattr(owner, attr)
        if isinstance(conv, BranchConv):
            raise ValueError(f"{conv.name} already carries a branch; "
                             "compress before expanding again")
        bh, bw, pad = branch_geometry(conv, shape)
        o, i = conv.weight.shape[0], conv.weight.shape[1]
        zero_w = Tensor(np.zeros((o, i, bh, bw), dtype=conv.weight.dtype),
                        requires_grad=True)
        branch = ConvLayer(f"{conv.name}.branch", zero_w,
                           stride=conv.stride, padding=pad)
        conv.trainable = False
        setattr(owner, attr, BranchConv(conv, branch))
    for bn in out.bn_layers():
        bn.frozen = fix_bn
    out.projector.trainable = True
    return out


def pad_kernel(kernel: Tensor, kh: int, kw: int) -> Tensor:
    """Zero-pad an OIHW kernel to extent (kh, kw), centered.

    The extent difference must be even per dimension so the smaller
    kernel sits exactly at the center; with matching conv paddings the
    padded kernel computes the same operator as the original.
    """
    if kernel.ndim != 4:
        raise T.ShapeError(f"expected an OIHW kernel, got shape {kernel.shape}")
    o, i, h, w = kernel.shape
    if h > kh or w > kw:
        raise ValueError(f"kernel {h}x{w} does not fit in {kh}x{kw}")
    dh, dw = kh - h, kw - w
    if dh % 2 or dw % 2:
        raise ValueError(
            f"kernel {h}x{w} cannot be centered in {kh}x{kw}: "
            "extent difference must be even")
    out = np.zeros((o, i, kh, kw), dtype=kernel.dtype)
    out[:, :, dh // 2:dh // 2 + h, dw // 2:dw // 2 + w] = kernel.data
    return Tensor(out)


def compress(model: Model) -> Model:
    """Fold every branch back into its host kernel on a copy of ``model``.

    Each fused kernel is host + pad(branch), an exact reparameterization
    of the two-path forward.  The result has the pre-expansion structure
    with every conv trainable-eligible again and batch norm unfrozen.
    """
    slots = [(owner, attr) for owner, attr in model.conv_slots()
             if isinstance(getattr(owner, attr), BranchConv)]
    if not slots:
        raise ValueError("model has no branches to compress")
    out = model.clone()
    for owner, attr in out.conv_slots():
        bc = getattr(owner, attr)
        if not isinstance(bc, BranchConv):
            continue
        kh, kw = bc.base.kernel_size
        fused_w = bc.base.weight.data + pad_kernel(bc.branch.weight, kh, kw).data
        fused = ConvLayer(bc.base.name, Tensor(fused_w, requires_grad=True),
                          stride=bc.base.stride, padding=bc.base.padding)
        setattr(owner, attr, fused)
    for bn in out.bn_layers():
        bn.frozen = False
    return out
