"""Parameterized U-Net family with exact complexity accounting.

A family member is identified by its encoder depth L and first-stage
width N1; every deeper stage doubles the channel count. The same spec
drives three independent things that must agree: the torch module that
gets trained, a closed-form parameter count, and an analytic FLOP
estimate. Keeping all three next to each other makes drift visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn


class InvalidSpecError(ValueError):
    """A model specification violates its structural constraints."""


@dataclass(frozen=True)
class ModelSpec:
    """Identifies one family member and its I/O contract.

    num_encoder_layers is the depth L (at least 2: one downsampling
    step). initial_channels is the width N1 of the first stage; stage i
    uses N1 * 2**(i-1) channels. input_side is the nominal square input
    resolution used for FLOP accounting only; the network itself accepts
    any H and W divisible by 2**(L-1).
    """

    num_encoder_layers: int
    initial_channels: int
    in_channels: int = 1
    num_classes: int = 4
    input_side: int = 256

    def __post_init__(self) -> None:
        if self.num_encoder_layers < 2:
            raise InvalidSpecError(
                f"need at least 2 encoder layers, got {self.num_encoder_layers}"
            )
        for name in ("initial_channels", "in_channels", "num_classes", "input_side"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"{name} must be positive, got {getattr(self, name)}")
        stride = self.downsample_factor
        if self.input_side % stride != 0:
            raise InvalidSpecError(
                f"input_side {self.input_side} not divisible by the "
                f"total downsampling factor {stride}"
            )

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.num_encoder_layers - 1)

    def label(self) -> str:
        return f"U-Net[{self.num_encoder_layers},{self.initial_channels}]"


def channel_schedule(spec: ModelSpec) -> list[int]:
    """Per-stage channel widths, shallowest first: N1 * 2**(i-1)."""
    return [spec.initial_channels * 2 ** i for i in range(spec.num_encoder_layers)]


class _DoubleConv(nn.Module):
    """Two 3x3 conv + batchnorm + ReLU blocks at constant resolution.

    Convolutions carry no bias; the batchnorm shift absorbs it.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class _UpStage(nn.Module):
    """Transposed-conv upsampling, skip concatenation, double conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, kernel_size=2, stride=2)
        self.conv = _DoubleConv(2 * out_ch, out_ch)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.up(x)
        return self.conv(torch.cat([skip, x], dim=1))


class SegmentationModel(nn.Module):
    """U-Net_[L,N1]: L encoder stages, L-1 decoder stages, 1x1 head.

    Produces raw per-class logits; softening and loss weighting live in
    the losses module.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        widths = channel_schedule(spec)

        downs = []
        prev = spec.in_channels
        for w in widths:
            downs.append(_DoubleConv(prev, w))
            prev = w
        self.down_stages = nn.ModuleList(downs)
        self.pool = nn.MaxPool2d(2)

        self.up_stages = nn.ModuleList(
            _UpStage(widths[i + 1], widths[i])
            for i in reversed(range(spec.num_encoder_layers - 1))
        )
        self.head = nn.Conv2d(widths[0], spec.num_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected input of shape [B, {self.spec.in_channels}, H, W], "
                f"got {tuple(x.shape)}"
            )
        stride = self.spec.downsample_factor
        if x.shape[-2] % stride or x.shape[-1] % stride:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by the "
                f"downsampling factor {stride} of {self.spec.label()}"
            )

        skips = []
        for i, stage in enumerate(self.down_stages):
            if i > 0:
                x = self.pool(x)
            x = stage(x)
            skips.append(x)

        for stage, skip in zip(self.up_stages, reversed(skips[:-1])):
            x = stage(x, skip)
        return self.head(x)


def _seeded_init(model: nn.Module, seed: int) -> None:
    # He-style normal fills drawn from a private generator so that
    # construction is reproducible regardless of torch's global RNG.
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan = module.out_channels * module.kernel_size[0] * module.kernel_size[1]
                module.weight.normal_(0.0, math.sqrt(2.0 / fan), generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.ConvTranspose2d):
                fan = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                module.weight.normal_(0.0, math.sqrt(2.0 / fan), generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_model(spec: ModelSpec, seed: int = 0) -> SegmentationModel:
    """Construct a family member with deterministic seeded weights."""
    model = SegmentationModel(spec)
    _seeded_init(model, seed)
    return model


def count_parameters(model: nn.Module) -> int:
    """Trainable parameter count by direct enumeration."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _double_conv_params(in_ch: int, out_ch: int) -> int:
    conv1 = 9 * in_ch * out_ch
    conv2 = 9 * out_ch * out_ch
    norms = 2 * (2 * out_ch)
    return conv1 + conv2 + norms


def analytic_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count walked stage by stage.

    Independent of the torch module: this only does arithmetic on the
    channel schedule, which is what makes it usable as a cross-check.
    """
    widths = channel_schedule(spec)
    total = 0

    prev = spec.in_channels
    for w in widths:
        total += _double_conv_params(prev, w)
        prev = w

    for i in reversed(range(spec.num_encoder_layers - 1)):
        up_in, up_out = widths[i + 1], widths[i]
        total += 4 * up_in * up_out + up_out  # 2x2 transposed conv, with bias
        total += _double_conv_params(2 * up_out, up_out)

    total += widths[0] * spec.num_classes + spec.num_classes  # 1x1 head
    return total


def parameter_bytes(spec: ModelSpec, bytes_per_param: int = 4) -> int:
    """Storage footprint of the weights at float32 by default."""
    return analytic_param_count(spec) * bytes_per_param


@dataclass
class LayerCost:
    """FLOPs attributed to one named layer at one resolution."""

    name: str
    kind: str
    out_shape: tuple[int, int, int]
    flops: int


@dataclass
class ComplexityReport:
    """Everything the complexity table needs for one spec."""

    spec: ModelSpec
    param_count: int
    param_bytes: int
    flops_total: int
    flops_by_kind: dict[str, int] = field(default_factory=dict)
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def macs_total(self) -> int:
        # Only multiply-accumulate work is halvable; comparisons and
        # adds from norm/act/pool are already single ops.
        return self.flops_total // 2


def _conv_flops(h: int, w: int, k: int, cin: int, cout: int, bias: bool) -> int:
    # One MAC = 2 FLOPs; bias adds are counted on top.
    macs = h * w * k * k * cin * cout
    flops = 2 * macs
    if bias:
        flops += h * w * cout
    return flops


def flops_breakdown(spec: ModelSpec, input_side: int | None = None) -> ComplexityReport:
    """Analytic per-layer FLOP accounting for one forward pass.

    Counts one multiply-accumulate as 2 FLOPs. Batchnorm is charged 2
    FLOPs per element (scale and shift, the statistics being folded at
    inference), ReLU 1 comparison per element, 2x2 max pooling 3
    comparisons per output element. Transposed 2x2/stride-2 convolution
    touches each output element with exactly one kernel tap, so its MAC
    count is H_out * W_out * C_in * C_out.
    """
    side = spec.input_side if input_side is None else input_side
    if side % spec.downsample_factor != 0:
        raise InvalidSpecError(
            f"input side {side} not divisible by {spec.downsample_factor}"
        )

    widths = channel_schedule(spec)
    layers: list[LayerCost] = []

    def add(name: str, kind: str, c: int, h: int, w: int, flops: int) -> None:
        layers.append(LayerCost(name, kind, (c, h, w), flops))

    def add_double_conv(name: str, cin: int, cout: int, h: int, w: int) -> None:
        add(f"{name}.conv1", "conv", cout, h, w, _conv_flops(h, w, 3, cin, cout, bias=False))
        add(f"{name}.bn1", "norm", cout, h, w, 2 * cout * h * w)
        add(f"{name}.relu1", "act", cout, h, w, cout * h * w)
        add(f"{name}.conv2", "conv", cout, h, w, _conv_flops(h, w, 3, cout, cout, bias=False))
        add(f"{name}.bn2", "norm", cout, h, w, 2 * cout * h * w)
        add(f"{name}.relu2", "act", cout, h, w, cout * h * w)

    h = w = side
    prev = spec.in_channels
    for i, width in enumerate(widths):
        if i > 0:
            h //= 2
            w //= 2
            add(f"enc{i + 1}.pool", "pool", prev, h, w, 3 * prev * h * w)
        add_double_conv(f"enc{i + 1}", prev, width, h, w)
        prev = width

    for i in reversed(range(spec.num_encoder_layers - 1)):
        h *= 2
        w *= 2
        up_in, up_out = widths[i + 1], widths[i]
        up_flops = 2 * h * w * up_in * up_out + h * w * up_out
        add(f"dec{i + 1}.up", "conv", up_out, h, w, up_flops)
        add_double_conv(f"dec{i + 1}", 2 * up_out, up_out, h, w)

    add(
        "head",
        "conv",
        spec.num_classes,
        h,
        w,
        _conv_flops(h, w, 1, widths[0], spec.num_classes, bias=True),
    )

    by_kind: dict[str, int] = {}
    for layer in layers:
        by_kind[layer.kind] = by_kind.get(layer.kind, 0) + layer.flops
    return ComplexityReport(
        spec=spec,
        param_count=analytic_param_count(spec),
        param_bytes=parameter_bytes(spec),
        flops_total=sum(layer.flops for layer in layers),
        flops_by_kind=by_kind,
        layers=layers,
    )


def estimate_flops(spec: ModelSpec, input_side: int | None = None) -> int:
    """Total forward-pass FLOPs for one image at the given resolution."""
    return flops_breakdown(spec, input_side).flops_total
