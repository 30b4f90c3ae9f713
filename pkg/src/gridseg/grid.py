"""Grid-structured segmentation network.

The model is a two-dimensional lattice: horizontal *streams* keep a fixed
resolution and channel width, vertical *columns* either halve resolution
while doubling channels (subsampling) or do the reverse (upsampling).
Stream i carries base_channels * 2**i channels at the input resolution
ceil-halved i times.

Column update, with X[i][j] the output of the block at stream i, column j:

  subsampling column:  X[i][j] = X[i][j-1] + R(X[i][j-1]) + D(X[i-1][j])
  upsampling column:   X[i][j] = X[i][j-1] + R(X[i][j-1]) + U(X[i+1][j])

R is a preactivation residual unit, D/U are the resampling units; missing
neighbors at the grid border simply drop their term. Subsampling columns
evaluate top-to-bottom so D consumes the same column; upsampling columns
evaluate bottom-to-top. Information enters through a stem on stream 0 and
leaves through a 1x1 head on stream 0 after the last column.

Connections can be switched off per block via a :class:`ConnectionMask`;
presets reproduce classic topologies (single encoder-decoder path, the
same with skip wires, and a full-resolution residual stream over a
non-residual down/up path). Masked parameters stay allocated (and frozen)
unless the model is built with ``prune_masked=True``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import ops
from .tensor import Tape, Tensor

SUB = "sub"
UP = "up"
_MASK_PRESETS = ("full", "conv_deconv", "u_net", "frrn")


# ---------------------------------------------------------------------------
# model description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Static description of a grid model."""

    n_streams: int
    column_kinds: tuple[str, ...]
    base_channels: int = 16
    num_classes: int = 19
    image_channels: int = 3
    dropout_p: float = 0.9
    fusion: str = "sum"
    vertical_residual: bool = False
    mask: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "column_kinds", tuple(self.column_kinds))
        if self.n_streams < 1:
            raise ValueError(f"n_streams must be >= 1, got {self.n_streams}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_channels < 1:
            raise ValueError(f"image_channels must be >= 1, got {self.image_channels}")
        bad = [k for k in self.column_kinds if k not in (SUB, UP)]
        if bad:
            raise ValueError(f"column kinds must be '{SUB}' or '{UP}', got {bad}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1], got {self.dropout_p}")
        if self.fusion not in ("sum", "concat"):
            raise ValueError(f"fusion must be 'sum' or 'concat', got {self.fusion!r}")
        if self.mask not in _MASK_PRESETS:
            raise ValueError(f"unknown mask preset {self.mask!r}; choose from {_MASK_PRESETS}")

    @property
    def n_columns(self) -> int:
        return len(self.column_kinds)

    @property
    def n_sub(self) -> int:
        return sum(1 for k in self.column_kinds if k == SUB)

    @property
    def n_up(self) -> int:
        return sum(1 for k in self.column_kinds if k == UP)

    def stream_channels(self, i: int) -> int:
        return self.base_channels * (1 << i)

    def to_dict(self) -> dict:
        return {
            "n_streams": self.n_streams,
            "column_kinds": list(self.column_kinds),
            "base_channels": self.base_channels,
            "num_classes": self.num_classes,
            "image_channels": self.image_channels,
            "dropout_p": self.dropout_p,
            "fusion": self.fusion,
            "vertical_residual": self.vertical_residual,
            "mask": self.mask,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown grid spec keys: {sorted(unknown)}")
        return cls(**d)


def symmetric_columns(n_sub: int, n_up: int) -> tuple[str, ...]:
    """All subsampling columns followed by all upsampling columns."""
    return (SUB,) * n_sub + (UP,) * n_up


def stream_dims(spec: GridSpec, i: int, input_hw) -> tuple[int, int, int]:
    """(channels, height, width) of stream i for the given input size."""
    if not 0 <= i < spec.n_streams:
        raise ValueError(f"stream index {i} outside [0, {spec.n_streams})")
    h, w = int(input_hw[0]), int(input_hw[1])
    if h < 1 or w < 1:
        raise ValueError(f"input size must be positive, got {(h, w)}")
    for _ in range(i):
        h = (h + 1) // 2
        w = (w + 1) // 2
    return spec.stream_channels(i), h, w


# ---------------------------------------------------------------------------
# connection mask
# ---------------------------------------------------------------------------


@dataclass
class ConnectionMask:
    """Per-block connection gates, indexed [stream, column].

    ``horizontal_on`` gates the whole horizontal edge (the identity wire
    and the residual unit riding on it); ``residual_on`` additionally
    gates just the learned residual mapping, so a block can pass its
    predecessor through unchanged. ``vertical_on`` gates the resampling
    edge. Gates on edges that do not exist structurally are ignored.
    """

    horizontal_on: np.ndarray
    residual_on: np.ndarray
    vertical_on: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.horizontal_on, self.residual_on, self.vertical_on)}
        if len(shapes) != 1:
            raise ValueError(f"mask field shapes differ: {shapes}")

    @classmethod
    def all_on(cls, spec: GridSpec) -> "ConnectionMask":
        shape = (spec.n_streams, spec.n_columns)
        return cls(np.ones(shape, bool), np.ones(shape, bool), np.ones(shape, bool))

    def copy(self) -> "ConnectionMask":
        return ConnectionMask(self.horizontal_on.copy(), self.residual_on.copy(),
                              self.vertical_on.copy())


def _monotone_kinds_or_raise(name: str, spec: GridSpec) -> None:
    if spec.n_sub < 1 or spec.n_up < 1:
        raise ValueError(f"mask preset {name!r} needs at least one sub and one up column")
    if spec.column_kinds != symmetric_columns(spec.n_sub, spec.n_up):
        raise ValueError(
            f"mask preset {name!r} requires all sub columns before all up columns, "
            f"got {spec.column_kinds}"
        )


def _path_profile(spec: GridSpec) -> list[int]:
    """Stream depth of the single encoder-decoder path after each column."""
    deepest = spec.n_streams - 1
    profile = []
    for s in range(1, spec.n_sub + 1):
        profile.append(math.ceil(s * deepest / spec.n_sub))
    for u in range(1, spec.n_up + 1):
        profile.append(((spec.n_up - u) * deepest) // spec.n_up)
    return profile


def preset_mask(name: str, spec: GridSpec) -> ConnectionMask:
    """Build one of the named connection-mask presets for this spec."""
    n, cols = spec.n_streams, spec.n_columns
    if name == "full":
        return ConnectionMask.all_on(spec)
    if name == "frrn":
        if n < 2:
            raise ValueError("mask preset 'frrn' needs at least two streams")
        h = np.ones((n, cols), bool)
        r = np.zeros((n, cols), bool)
        r[0, :] = True  # stream 0 keeps its residual units; deeper streams are wires
        v = np.ones((n, cols), bool)
        return ConnectionMask(h, r, v)
    if name in ("conv_deconv", "u_net"):
        if n < 2:
            raise ValueError(f"mask preset {name!r} needs at least two streams")
        _monotone_kinds_or_raise(name, spec)
        h = np.zeros((n, cols), bool)
        r = np.zeros((n, cols), bool)
        v = np.zeros((n, cols), bool)
        profile = _path_profile(spec)
        pos = 0
        left_at: dict[int, int] = {}
        returned_at: dict[int, int] = {}
        for t, kind in enumerate(spec.column_kinds):
            target = profile[t]
            h[pos, t] = True
            r[pos, t] = True
            if kind == SUB:
                for q in range(pos, target):
                    left_at[q] = t
                for q in range(pos + 1, target + 1):
                    v[q, t] = True
            else:
                for q in range(target, pos):
                    returned_at.setdefault(q, t)
                for q in range(pos - 1, target - 1, -1):
                    v[q, t] = True
            pos = target
        if name == "u_net":
            # close each descend/ascend loop with a horizontal skip wire
            for q, t_left in left_at.items():
                t_back = returned_at.get(q)
                if t_back is None:
                    continue
                for t in range(t_left + 1, t_back + 1):
                    h[q, t] = True
                    r[q, t] = True
        return ConnectionMask(h, r, v)
    raise ValueError(f"unknown mask preset {name!r}; choose from {_MASK_PRESETS}")


def _activity(spec: GridSpec, mask: ConnectionMask | None) -> np.ndarray:
    """Which blocks carry a value, per stream and column (column 0 = stem).

    With ``mask=None`` this is the structural activity used for parameter
    allocation; with a mask it is what the forward pass actually computes.
    """
    n, cols = spec.n_streams, spec.n_columns
    act = np.zeros((n, cols + 1), bool)
    act[0, 0] = True

    def h_on(i, t):
        return mask is None or bool(mask.horizontal_on[i, t])

    def v_on(i, t):
        return mask is None or bool(mask.vertical_on[i, t])

    for t, kind in enumerate(spec.column_kinds):
        c = t + 1
        rows = range(n) if kind == SUB else range(n - 1, -1, -1)
        for i in rows:
            horizontal = act[i, c - 1] and h_on(i, t)
            if kind == SUB:
                vertical = i > 0 and act[i - 1, c] and v_on(i, t)
            else:
                vertical = i < n - 1 and act[i + 1, c] and v_on(i, t)
            act[i, c] = horizontal or vertical
    return act


# ---------------------------------------------------------------------------
# units
# ---------------------------------------------------------------------------


class ResidualUnit:
    """Preactivation residual mapping: BN-relu-conv3x3-BN-relu-conv3x3."""

    def __init__(self, channels: int, rng, dtype):
        self.bn1 = ops.BatchNorm(channels, dtype=dtype)
        self.conv1 = ops.conv_params(rng, channels, channels, 3, 3, 1, (1, 1), dtype)
        self.bn2 = ops.BatchNorm(channels, dtype=dtype)
        self.conv2 = ops.conv_params(rng, channels, channels, 3, 3, 1, (1, 1), dtype)

    def forward(self, x: Tensor, training: bool, tape: Tape | None) -> Tensor:
        t = ops.relu(ops.batch_norm(x, self.bn1, training, tape), tape)
        t = ops.conv2d(t, self.conv1, tape)
        t = ops.relu(ops.batch_norm(t, self.bn2, training, tape), tape)
        return ops.conv2d(t, self.conv2, tape)

    def named_parameters(self, prefix: str):
        return [
            (f"{prefix}.bn1.beta", self.bn1.beta),
            (f"{prefix}.bn1.gamma", self.bn1.gamma),
            (f"{prefix}.bn2.beta", self.bn2.beta),
            (f"{prefix}.bn2.gamma", self.bn2.gamma),
            (f"{prefix}.conv1.bias", self.conv1.bias),
            (f"{prefix}.conv1.weight", self.conv1.weight),
            (f"{prefix}.conv2.bias", self.conv2.bias),
            (f"{prefix}.conv2.weight", self.conv2.weight),
        ]

    def named_buffers(self, prefix: str):
        return [
            (f"{prefix}.bn1.running_mean", self.bn1.running_mean),
            (f"{prefix}.bn1.running_var", self.bn1.running_var),
            (f"{prefix}.bn2.running_mean", self.bn2.running_mean),
            (f"{prefix}.bn2.running_var", self.bn2.running_var),
        ]


class DownUnit:
    """BN-relu-conv3x3 stride 2, doubling channels; optional 1x1 shortcut."""

    def __init__(self, in_channels: int, rng, dtype, shortcut: bool):
        self.bn = ops.BatchNorm(in_channels, dtype=dtype)
        self.conv = ops.conv_params(rng, 2 * in_channels, in_channels, 3, 3, 2, (1, 1), dtype)
        self.shortcut = None
        if shortcut:
            self.shortcut = ops.conv_params(rng, 2 * in_channels, in_channels, 1, 1, 2, (0, 0), dtype)

    def forward(self, x: Tensor, training: bool, tape: Tape | None) -> Tensor:
        y = ops.conv2d_down(ops.relu(ops.batch_norm(x, self.bn, training, tape), tape),
                            self.conv, tape)
        if self.shortcut is not None:
            y = ops.add(y, ops.conv2d(x, self.shortcut, tape), tape)
        return y

    def named_parameters(self, prefix: str):
        out = [
            (f"{prefix}.bn.beta", self.bn.beta),
            (f"{prefix}.bn.gamma", self.bn.gamma),
            (f"{prefix}.conv.bias", self.conv.bias),
            (f"{prefix}.conv.weight", self.conv.weight),
        ]
        if self.shortcut is not None:
            out += [
                (f"{prefix}.shortcut.bias", self.shortcut.bias),
                (f"{prefix}.shortcut.weight", self.shortcut.weight),
            ]
        return out

    def named_buffers(self, prefix: str):
        return [
            (f"{prefix}.bn.running_mean", self.bn.running_mean),
            (f"{prefix}.bn.running_var", self.bn.running_var),
        ]


class UpUnit:
    """BN-relu-transposed-conv3x3 stride 2, halving channels; optional shortcut."""

    def __init__(self, in_channels: int, rng, dtype, shortcut: bool):
        if in_channels % 2:
            raise ValueError(f"UpUnit input channels must be even, got {in_channels}")
        out_channels = in_channels // 2
        self.bn = ops.BatchNorm(in_channels, dtype=dtype)
        self.conv = ops.conv_params(rng, in_channels, out_channels, 3, 3, 2, (1, 1), dtype,
                                    bias_len=out_channels)
        self.shortcut = None
        if shortcut:
            self.shortcut = ops.conv_params(rng, in_channels, out_channels, 1, 1, 2, (0, 0),
                                            dtype, bias_len=out_channels)

    def forward(self, x: Tensor, target_hw, training: bool, tape: Tape | None) -> Tensor:
        y = ops.deconv2d_up(ops.relu(ops.batch_norm(x, self.bn, training, tape), tape),
                            self.conv, target_hw, tape)
        if self.shortcut is not None:
            y = ops.add(y, ops.deconv2d_up(x, self.shortcut, target_hw, tape), tape)
        return y

    def named_parameters(self, prefix: str):
        out = [
            (f"{prefix}.bn.beta", self.bn.beta),
            (f"{prefix}.bn.gamma", self.bn.gamma),
            (f"{prefix}.conv.bias", self.conv.bias),
            (f"{prefix}.conv.weight", self.conv.weight),
        ]
        if self.shortcut is not None:
            out += [
                (f"{prefix}.shortcut.bias", self.shortcut.bias),
                (f"{prefix}.shortcut.weight", self.shortcut.weight),
            ]
        return out

    def named_buffers(self, prefix: str):
        return [
            (f"{prefix}.bn.running_mean", self.bn.running_mean),
            (f"{prefix}.bn.running_var", self.bn.running_var),
        ]


@dataclass
class GridBlock:
    row: int
    col: int  # grid column, 0-based
    kind: str
    res: ResidualUnit | None = None
    vert: DownUnit | UpUnit | None = None
    proj: ops.ConvParams | None = None  # concat-fusion projection
    proj_slots: tuple[bool, bool] = (False, False)  # (horizontal, vertical) slots

    def named_parameters(self):
        prefix = f"block.{self.row}.{self.col}"
        out = []
        if self.proj is not None:
            out += [(f"{prefix}.proj.bias", self.proj.bias),
                    (f"{prefix}.proj.weight", self.proj.weight)]
        if self.res is not None:
            out += self.res.named_parameters(f"{prefix}.res")
        if self.vert is not None:
            out += self.vert.named_parameters(f"{prefix}.vert")
        return sorted(out, key=lambda kv: kv[0])

    def named_buffers(self):
        prefix = f"block.{self.row}.{self.col}"
        out = []
        if self.res is not None:
            out += self.res.named_buffers(f"{prefix}.res")
        if self.vert is not None:
            out += self.vert.named_buffers(f"{prefix}.vert")
        return sorted(out, key=lambda kv: kv[0])


def fuse_block(identity: Tensor | None, residual: Tensor | None, vertical: Tensor | None,
               proj: ops.ConvParams | None = None, tape: Tape | None = None) -> Tensor:
    """Combine the present addends of one block.

    Sum fusion adds them in fixed order (identity, residual, vertical).
    Concat fusion keeps two channel slots, (identity + residual) and
    vertical, stacks the present ones, and projects back with a 1x1 conv.
    """
    if residual is not None and identity is None:
        raise ValueError("fuse_block: residual addend without its identity input")
    if identity is None and vertical is None:
        raise ValueError("fuse_block: no inputs present")
    if proj is None:
        out = identity
        if residual is not None:
            out = ops.add(out, residual, tape)
        if vertical is not None:
            out = vertical if out is None else ops.add(out, vertical, tape)
        return out
    slots = []
    if identity is not None:
        slots.append(identity if residual is None else ops.add(identity, residual, tape))
    if vertical is not None:
        slots.append(vertical)
    stacked = slots[0] if len(slots) == 1 else ops.concat_channels(slots, tape)
    return ops.conv2d(stacked, proj, tape)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class GridModel:
    """Runtime network: stem, grid blocks in evaluation order, 1x1 head."""

    def __init__(self, spec: GridSpec, input_hw, mask: ConnectionMask | None = None,
                 seed: int = 0, dtype=np.float32, prune_masked: bool = False):
        h, w = int(input_hw[0]), int(input_hw[1])
        min_side = 1 << (spec.n_streams - 1)
        if h < min_side or w < min_side:
            raise ValueError(
                f"input {(h, w)} too small for {spec.n_streams} streams; "
                f"need at least {min_side} per side"
            )
        if mask is None:
            mask = preset_mask(spec.mask, spec)
        expected = (spec.n_streams, spec.n_columns)
        if mask.horizontal_on.shape != expected:
            raise ValueError(f"mask shape {mask.horizontal_on.shape} != {expected}")
        self.spec = spec
        self.mask = mask
        self.input_hw = (h, w)
        self.init_seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.prune_masked = bool(prune_masked)
        self.check_shapes = True

        self._struct_act = _activity(spec, None)
        self._masked_act = _activity(spec, mask)
        if spec.n_columns and not self._masked_act[0, spec.n_columns]:
            raise ValueError("connection mask leaves the output block unreachable")

        rng = np.random.default_rng(seed)
        self.stem_bn = ops.BatchNorm(spec.image_channels, dtype=dtype)
        self.stem_conv = ops.conv_params(rng, spec.base_channels, spec.image_channels,
                                         3, 3, 1, (1, 1), dtype)
        self.blocks: dict[tuple[int, int], GridBlock] = {}
        alloc_act = self._masked_act if prune_masked else self._struct_act
        for t, kind in enumerate(spec.column_kinds):
            c = t + 1
            rows = range(spec.n_streams) if kind == SUB else range(spec.n_streams - 1, -1, -1)
            for i in rows:
                if not alloc_act[i, c]:
                    continue
                block = GridBlock(i, t, kind)
                f_i = spec.stream_channels(i)
                has_horizontal = alloc_act[i, c - 1] and (
                    not prune_masked or mask.horizontal_on[i, t])
                if has_horizontal and (not prune_masked or mask.residual_on[i, t]):
                    block.res = ResidualUnit(f_i, rng, dtype)
                if kind == SUB:
                    has_vertical = i > 0 and alloc_act[i - 1, c]
                else:
                    has_vertical = i < spec.n_streams - 1 and alloc_act[i + 1, c]
                if has_vertical and (not prune_masked or mask.vertical_on[i, t]):
                    if kind == SUB:
                        block.vert = DownUnit(spec.stream_channels(i - 1), rng, dtype,
                                              spec.vertical_residual)
                    else:
                        block.vert = UpUnit(spec.stream_channels(i + 1), rng, dtype,
                                            spec.vertical_residual)
                if spec.fusion == "concat":
                    block.proj_slots = (bool(has_horizontal), block.vert is not None)
                    n_slots = sum(block.proj_slots)
                    if n_slots:
                        block.proj = ops.conv_params(rng, f_i, n_slots * f_i, 1, 1, 1,
                                                     (0, 0), dtype)
                self.blocks[(i, t)] = block
        self.head = ops.conv_params(rng, spec.num_classes, spec.base_channels, 1, 1, 1,
                                    (0, 0), dtype)

        self.eval_order: list[tuple[int, int]] = []
        for t, kind in enumerate(spec.column_kinds):
            rows = range(spec.n_streams) if kind == SUB else range(spec.n_streams - 1, -1, -1)
            for i in rows:
                if self._masked_act[i, t + 1]:
                    self.eval_order.append((i, t))
        self.stream_shapes = [stream_dims(spec, i, self.input_hw)
                              for i in range(spec.n_streams)]

    # -- bookkeeping ---------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [
            ("stem.bn.beta", self.stem_bn.beta),
            ("stem.bn.gamma", self.stem_bn.gamma),
            ("stem.conv.bias", self.stem_conv.bias),
            ("stem.conv.weight", self.stem_conv.weight),
        ]
        for key in sorted(self.blocks):
            out.extend(self.blocks[key].named_parameters())
        out += [("head.bias", self.head.bias), ("head.weight", self.head.weight)]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = [
            ("stem.bn.running_mean", self.stem_bn.running_mean),
            ("stem.bn.running_var", self.stem_bn.running_var),
        ]
        for key in sorted(self.blocks):
            out.extend(self.blocks[key].named_buffers())
        return out

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def residual_gate_ids(self) -> list[tuple[int, int]]:
        """Blocks whose residual unit actually runs, in evaluation order."""
        out = []
        for (i, t) in self.eval_order:
            block = self.blocks[(i, t)]
            if block.res is None:
                continue
            if self.mask.horizontal_on[i, t] and self.mask.residual_on[i, t] \
                    and self._masked_act[i, t]:
                out.append((i, t))
        return out

    def stream_hw(self, i: int, input_hw) -> tuple[int, int]:
        return stream_dims(self.spec, i, input_hw)[1:]

    # -- forward -------------------------------------------------------

    def forward(self, x, training: bool = False, drop_mask=None, tape: Tape | None = None,
                trace: dict | None = None) -> Tensor:
        """Run the grid; returns logits (n, num_classes, h, w).

        ``drop_mask`` (training only) zeroes the residual addend of
        selected blocks; identity wires and vertical units never drop.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1] != self.spec.image_channels:
            raise ValueError(
                f"expected input (n, {self.spec.image_channels}, h, w), got {x.shape}"
            )
        if drop_mask is not None and not training:
            raise ValueError("drop_mask is a training-mode feature; eval keeps every unit")
        in_hw = x.shape[2:]
        min_side = 1 << (self.spec.n_streams - 1)
        if min(in_hw) < min_side:
            raise ValueError(f"input {in_hw} smaller than minimum side {min_side}")
        hw = [stream_dims(self.spec, i, in_hw)[1:] for i in range(self.spec.n_streams)]

        stem = ops.conv2d(ops.batch_norm(x, self.stem_bn, training, tape), self.stem_conv, tape)
        if trace is not None:
            trace["stem"] = stem
        prev: dict[int, Tensor] = {0: stem}
        for t, kind in enumerate(self.spec.column_kinds):
            cur: dict[int, Tensor] = {}
            rows = range(self.spec.n_streams) if kind == SUB \
                else range(self.spec.n_streams - 1, -1, -1)
            for i in rows:
                if not self._masked_act[i, t + 1]:
                    continue
                block = self.blocks[(i, t)]
                identity = prev.get(i) if self.mask.horizontal_on[i, t] else None
                residual = None
                if identity is not None and block.res is not None \
                        and self.mask.residual_on[i, t]:
                    keep = drop_mask is None or drop_mask.keeps(i, t)
                    if keep:
                        residual = block.res.forward(identity, training, tape)
                    else:
                        residual = Tensor(np.zeros_like(identity.data))
                vertical = None
                if block.vert is not None and self.mask.vertical_on[i, t]:
                    src = cur.get(i - 1) if kind == SUB else cur.get(i + 1)
                    if src is not None:
                        if kind == SUB:
                            vertical = block.vert.forward(src, training, tape)
                        else:
                            vertical = block.vert.forward(src, hw[i], training, tape)
                if block.proj is not None:
                    # keep the projection's channel layout static: slots whose
                    # source is masked off at runtime are fed zeros instead
                    shape = (x.shape[0], self.spec.stream_channels(i), *hw[i])
                    if block.proj_slots[0] and identity is None:
                        identity = Tensor(np.zeros(shape, dtype=self.dtype))
                    if block.proj_slots[1] and vertical is None:
                        vertical = Tensor(np.zeros(shape, dtype=self.dtype))
                out = fuse_block(identity, residual, vertical, block.proj, tape)
                if self.check_shapes:
                    want = (x.shape[0], self.spec.stream_channels(i), *hw[i])
                    if out.shape != want:
                        raise RuntimeError(
                            f"block ({i},{t}) produced {out.shape}, expected {want}"
                        )
                cur[i] = out
                if trace is not None:
                    trace[(i, t)] = out
            prev = cur
        top = prev.get(0) if self.spec.n_columns else stem
        if top is None:
            raise RuntimeError("no value reached stream 0 at the last column")
        logits = ops.conv2d(top, self.head, tape)
        if trace is not None:
            trace["logits"] = logits
        return logits


def build_grid(spec: GridSpec, input_hw, mask: ConnectionMask | None = None,
               seed: int = 0, dtype=np.float32, prune_masked: bool = False) -> GridModel:
    """Construct a grid model; validates sizes, mask shape, and reachability."""
    return GridModel(spec, input_hw, mask=mask, seed=seed, dtype=dtype,
                     prune_masked=prune_masked)


# ---------------------------------------------------------------------------
# counting analytics
# ---------------------------------------------------------------------------


def count_params_exact(model: GridModel) -> int:
    """Total learnable scalars actually allocated (running stats excluded)."""
    return int(sum(p.size for _, p in model.named_parameters()))


def approx_param_count(spec: GridSpec) -> float:
    """Closed-form estimate 18 * 4**(n_streams-1) * F0^2 * (2.5*n_sub + n_up - 2)."""
    if spec.n_sub < 1:
        raise ValueError("approx_param_count needs at least one subsampling column")
    return 18.0 * 4.0 ** (spec.n_streams - 1) * spec.base_channels ** 2 \
        * (2.5 * spec.n_sub + spec.n_up - 2.0)


def approx_activation_count(spec: GridSpec, input_hw) -> float:
    """Closed-form per-sample estimate 6*H*W*F0*(4*n_up + 3*n_sub - 2)."""
    if spec.n_sub < 1:
        raise ValueError("approx_activation_count needs at least one subsampling column")
    h, w = int(input_hw[0]), int(input_hw[1])
    return 6.0 * h * w * spec.base_channels * (4.0 * spec.n_up + 3.0 * spec.n_sub - 2.0)


def activation_tally(model: GridModel, input_hw=None) -> int:
    """Per-sample count of every op output the forward pass materializes."""
    spec = model.spec
    in_hw = model.input_hw if input_hw is None else (int(input_hw[0]), int(input_hw[1]))
    size = [int(np.prod(stream_dims(spec, i, in_hw))) for i in range(spec.n_streams)]
    h, w = in_hw
    total = spec.image_channels * h * w          # stem BN output
    total += spec.base_channels * h * w          # stem conv output
    for (i, t) in model.eval_order:
        block = model.blocks[(i, t)]
        has_identity = model.mask.horizontal_on[i, t] and model._masked_act[i, t]
        run_res = has_identity and block.res is not None and model.mask.residual_on[i, t]
        if run_res:
            total += 6 * size[i]                 # bn, relu, conv, bn, relu, conv
        vert = None
        if block.vert is not None and model.mask.vertical_on[i, t]:
            j = i - 1 if block.kind == SUB else i + 1
            if model._masked_act[j, t + 1]:
                vert = block.vert
        if vert is not None:
            src = i - 1 if block.kind == SUB else i + 1
            total += 2 * size[src] + size[i]     # bn, relu, resampling conv
            if spec.vertical_residual:
                total += 2 * size[i]             # shortcut conv + add
        n_terms = int(has_identity) + int(run_res) + int(vert is not None)
        if block.proj is not None:
            slots = sum(block.proj_slots)        # zero-filled slots still stack
            if run_res:
                total += size[i]                 # identity + residual pre-sum
            if slots > 1:
                total += slots * size[i]         # concatenated stack
            total += size[i]                     # projection output
        elif n_terms > 1:
            total += (n_terms - 1) * size[i]     # pairwise sums
    total += spec.num_classes * h * w            # head logits
    return int(total)


def grid_report(model: GridModel) -> dict:
    """Counting and layout summary, JSON-serializable."""
    spec = model.spec
    exact = count_params_exact(model)
    approx_p = approx_param_count(spec) if spec.n_sub >= 1 else None
    approx_a = approx_activation_count(spec, model.input_hw) if spec.n_sub >= 1 else None
    tally = activation_tally(model)
    return {
        "spec": spec.to_dict(),
        "input_hw": list(model.input_hw),
        "exact_params": exact,
        "approx_params": approx_p,
        "approx_activations": approx_a,
        "activation_tally": tally,
        "activation_ratio": (tally / approx_a) if approx_a else None,
        "stream_shapes": [list(s) for s in model.stream_shapes],
        "eval_order": [f"s{i}c{t + 1}" for (i, t) in model.eval_order],
    }


def grid_report_json(model: GridModel) -> str:
    return json.dumps(grid_report(model), indent=2, sort_keys=True)
