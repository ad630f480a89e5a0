"""Compound-scaled convolutional backbone.

The stage table (a stem conv, seven inverted-bottleneck stages, and a 1x1
head conv followed by global pooling) is scaled by a single exponent phi
with base coefficients (alpha, beta, gamma) for depth, width, and input
resolution, under the resource constraint alpha * beta^2 * gamma^2 ~= 2.
Negative phi shrinks the network to desk scale.

`layer_plan` is the single source of architectural truth: both the analytic
MAC estimator and the backbone builder walk the same plan, so the estimator
is exact for the network actually built. Convolutions use "same"-style
geometry: output extent = ceil(input / stride), realized with asymmetric
zero padding (extra row/column at the bottom/right) ahead of the strict
symmetric-padding conv primitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from . import tensorcore as tc
from .tensorcore import Tensor

__all__ = [
    "StageSpec",
    "NetworkSpec",
    "ScalingCoefficients",
    "ScaledSpec",
    "table1_spec",
    "check_constraint",
    "apply_compound_scaling",
    "layer_plan",
    "estimate_flops",
    "build_backbone",
    "grid_search_coefficients",
    "Backbone",
    "SE_RATIO",
]

VALID_KERNELS = (1, 3, 5)
SE_RATIO = 0.25  # squeeze-and-excitation bottleneck, relative to block input


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def round_to_divisor(v: float, divisor: int) -> int:
    """Nearest positive multiple of `divisor`, ties rounding up."""
    return max(divisor, round_half_up(v / divisor) * divisor)


def same_out(extent: int, stride: int) -> int:
    return -(-extent // stride)


@dataclass(frozen=True)
class StageSpec:
    kind: str  # "conv" | "mbconv"
    kernel: int
    channels: int
    layers: int
    stride: int
    resolution: int  # input resolution of the stage's first layer
    expansion: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "mbconv"):
            raise ConfigError(f"unknown stage kind {self.kind!r}")
        if self.kernel not in VALID_KERNELS:
            raise ConfigError(f"kernel must be one of {VALID_KERNELS}, got {self.kernel}")
        if self.layers < 1 or self.channels < 1 or self.stride < 1:
            raise ConfigError("layers, channels, and stride must be >= 1")
        if self.expansion not in (1, 6):
            raise ConfigError(f"expansion must be 1 or 6, got {self.expansion}")


def _check_resolution_chain(stages, input_resolution):
    res = input_resolution
    for i, st in enumerate(stages):
        if st.resolution != res:
            raise ConfigError(
                f"stage {i + 1} resolution {st.resolution} inconsistent with "
                f"stride chain (expected {res})"
            )
        res = same_out(res, st.stride)


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple[StageSpec, ...]
    input_resolution: int = 224

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("network needs at least one stage")
        _check_resolution_chain(self.stages, self.input_resolution)


@dataclass(frozen=True)
class ScalingCoefficients:
    alpha: float
    beta: float
    gamma: float
    phi: float

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 1.0:
            raise ConfigError("alpha, beta, gamma must all be >= 1")


@dataclass(frozen=True)
class ScaledSpec:
    stages: tuple[StageSpec, ...]
    input_resolution: int
    coefficients: ScalingCoefficients

    def __post_init__(self):
        _check_resolution_chain(self.stages, self.input_resolution)


# (kind, expansion, kernel, channels, layers, stride) per stage
_TABLE1_ROWS = (
    ("conv", 1, 3, 32, 1, 2),
    ("mbconv", 1, 3, 16, 1, 1),
    ("mbconv", 6, 3, 24, 2, 2),
    ("mbconv", 6, 5, 40, 2, 2),
    ("mbconv", 6, 3, 80, 3, 2),
    ("mbconv", 6, 5, 112, 3, 1),
    ("mbconv", 6, 5, 192, 4, 2),
    ("mbconv", 6, 3, 320, 1, 1),
    ("conv", 1, 1, 1280, 1, 1),
)


def _stages_for_resolution(rows, input_resolution):
    stages = []
    res = input_resolution
    for kind, expansion, kernel, channels, layers, stride in rows:
        stages.append(
            StageSpec(
                kind=kind,
                expansion=expansion,
                kernel=kernel,
                channels=channels,
                layers=layers,
                stride=stride,
                resolution=res,
            )
        )
        res = same_out(res, stride)
    return tuple(stages)


def table1_spec(input_resolution: int = 224) -> NetworkSpec:
    """The default nine-stage table at the given native input resolution."""
    return NetworkSpec(
        stages=_stages_for_resolution(_TABLE1_ROWS, input_resolution),
        input_resolution=input_resolution,
    )


def check_constraint(c: ScalingCoefficients, tolerance: float = 0.1) -> bool:
    """True iff |alpha * beta^2 * gamma^2 - 2| <= tolerance."""
    return abs(c.alpha * c.beta**2 * c.gamma**2 - 2.0) <= tolerance


def constraint_product(c: ScalingCoefficients) -> float:
    return c.alpha * c.beta**2 * c.gamma**2


def apply_compound_scaling(
    spec: NetworkSpec, c: ScalingCoefficients, channel_divisor: int = 8
) -> ScaledSpec:
    """Scale depth, width, and resolution by alpha^phi, beta^phi, gamma^phi.

    Layer counts round half-up with a floor of 1; channels round to the
    nearest multiple of the divisor (ties up, minimum one unit); the input
    resolution rounds half-up and is bumped to even if odd. A scale factor of
    exactly 1 leaves the corresponding quantity untouched, so phi = 0 is an
    exact identity.
    """
    if channel_divisor < 1:
        raise ConfigError("channel divisor must be >= 1")
    d = c.alpha**c.phi
    w = c.beta**c.phi
    r = c.gamma**c.phi

    if r == 1.0:
        res = spec.input_resolution
    else:
        res = max(1, round_half_up(spec.input_resolution * r))
        if res % 2 == 1:
            res += 1

    stages = []
    cur = res
    for st in spec.stages:
        layers = st.layers if d == 1.0 else max(1, round_half_up(st.layers * d))
        channels = (
            st.channels if w == 1.0 else round_to_divisor(st.channels * w, channel_divisor)
        )
        stages.append(
            replace(st, layers=layers, channels=channels, resolution=cur)
        )
        cur = same_out(cur, st.stride)
    return ScaledSpec(stages=tuple(stages), input_resolution=res, coefficients=c)


# --- layer plan and MAC accounting ---------------------------------------------


@dataclass(frozen=True)
class ConvPlan:
    cin: int
    cout: int
    kernel: int
    stride: int
    in_res: int
    out_res: int

    @property
    def macs(self) -> int:
        return self.cout * self.cin * self.kernel**2 * self.out_res**2


@dataclass(frozen=True)
class DepthwisePlan:
    channels: int
    kernel: int
    stride: int
    in_res: int
    out_res: int

    @property
    def macs(self) -> int:
        return self.channels * self.kernel**2 * self.out_res**2


@dataclass(frozen=True)
class DensePlan:
    fin: int
    fout: int

    @property
    def macs(self) -> int:
        return self.fin * self.fout


def se_hidden_width(block_in_channels: int) -> int:
    return max(1, round_half_up(block_in_channels * SE_RATIO))


def layer_plan(spec, in_channels: int = 1) -> list:
    """Flat list of multiply-carrying layers (convs, depthwise convs, SE and
    other dense layers) for the network the spec describes, per sample.

    Elementwise ops, batch norm, activations, and pooling carry no MACs and
    do not appear. Within a stage only the first layer applies the stage
    stride and the channel change.
    """
    plans = []
    prev_c = in_channels
    res = spec.input_resolution
    for st in spec.stages:
        for layer_idx in range(st.layers):
            stride = st.stride if layer_idx == 0 else 1
            cin = prev_c if layer_idx == 0 else st.channels
            out_res = same_out(res, stride)
            if st.kind == "conv":
                plans.append(
                    ConvPlan(cin=cin, cout=st.channels, kernel=st.kernel,
                             stride=stride, in_res=res, out_res=out_res)
                )
            else:
                cexp = cin * st.expansion
                if st.expansion > 1:
                    plans.append(
                        ConvPlan(cin=cin, cout=cexp, kernel=1, stride=1,
                                 in_res=res, out_res=res)
                    )
                plans.append(
                    DepthwisePlan(channels=cexp, kernel=st.kernel, stride=stride,
                                  in_res=res, out_res=out_res)
                )
                se_h = se_hidden_width(cin)
                plans.append(DensePlan(fin=cexp, fout=se_h))
                plans.append(DensePlan(fin=se_h, fout=cexp))
                plans.append(
                    ConvPlan(cin=cexp, cout=st.channels, kernel=1, stride=1,
                             in_res=out_res, out_res=out_res)
                )
            prev_c = st.channels
            res = out_res
    return plans


def estimate_flops(spec, in_channels: int = 1) -> int:
    """Analytic multiply-accumulate count per sample for the spec's network."""
    return sum(p.macs for p in layer_plan(spec, in_channels))


# --- backbone construction ------------------------------------------------------


def _same_pads(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    out = same_out(extent, stride)
    total = max(0, (out - 1) * stride + kernel - extent)
    begin = total // 2
    return begin, total - begin  # extra padding goes to the end


def _same_pad(x: Tensor, kernel: int, stride: int) -> Tensor:
    h, w = x.data.shape[2], x.data.shape[3]
    top, bottom = _same_pads(h, kernel, stride)
    left, right = _same_pads(w, kernel, stride)
    return tc.pad2d(x, top, bottom, left, right)


class _BatchNorm:
    def __init__(self, channels: int, dtype):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return tc.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, train
        )

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


def _conv_init(rng, cout, cin, k, dtype):
    std = math.sqrt(2.0 / (cin * k * k))
    return Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype), requires_grad=True)


def _dense_init(rng, fin, fout, dtype):
    std = math.sqrt(2.0 / fin)
    w = Tensor(rng.normal(0.0, std, (fin, fout)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)
    return w, b


class ConvBNAct:
    """Same-padded conv + batch norm + SiLU."""

    def __init__(self, cin, cout, kernel, stride, rng, dtype):
        self.kernel = kernel
        self.stride = stride
        self.w = _conv_init(rng, cout, cin, kernel, dtype)
        self.bn = _BatchNorm(cout, dtype)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        x = _same_pad(x, self.kernel, self.stride)
        x = tc.conv2d(x, self.w, stride=self.stride, zero_padding=0)
        return tc.silu(self.bn(x, train))

    def parameters(self):
        return [("conv.w", self.w)] + [(f"bn.{n}", t) for n, t in self.bn.parameters()]

    def buffers(self):
        return [(f"bn.{n}", b) for n, b in self.bn.buffers()]


class MBConvBlock:
    """Inverted bottleneck: 1x1 expansion (if expansion > 1), depthwise k x k,
    squeeze-and-excitation gate, linear 1x1 projection, and a residual skip
    when the stride is 1 and the channel count is preserved."""

    def __init__(self, cin, cout, kernel, stride, expansion, rng, dtype):
        self.kernel = kernel
        self.stride = stride
        self.expansion = expansion
        cexp = cin * expansion
        se_h = se_hidden_width(cin)
        self.expand = None
        if expansion > 1:
            self.expand = (_conv_init(rng, cexp, cin, 1, dtype), _BatchNorm(cexp, dtype))
        self.dw_w = _conv_init(rng, cexp, 1, kernel, dtype)  # depthwise fan-in is k*k
        self.dw_bn = _BatchNorm(cexp, dtype)
        self.se_w1, self.se_b1 = _dense_init(rng, cexp, se_h, dtype)
        self.se_w2, self.se_b2 = _dense_init(rng, se_h, cexp, dtype)
        self.proj_w = _conv_init(rng, cout, cexp, 1, dtype)
        self.proj_bn = _BatchNorm(cout, dtype)
        self.skip = stride == 1 and cin == cout

    def forward(self, x: Tensor, train: bool) -> Tensor:
        h = x
        if self.expand is not None:
            w, bn = self.expand
            h = tc.silu(bn(tc.conv2d(h, w, 1, 0), train))
        h = _same_pad(h, self.kernel, self.stride)
        h = tc.depthwise_conv2d(h, self.dw_w, stride=self.stride, zero_padding=0)
        h = tc.silu(self.dw_bn(h, train))
        # squeeze-and-excitation: per-channel gate from globally pooled features
        n, cexp = h.data.shape[0], h.data.shape[1]
        s = tc.reshape(tc.global_avg_pool(h), (n, cexp))
        s = tc.silu(tc.dense(s, self.se_w1, self.se_b1))
        s = tc.sigmoid(tc.dense(s, self.se_w2, self.se_b2))
        h = tc.mul(h, tc.reshape(s, (n, cexp, 1, 1)))
        h = self.proj_bn(tc.conv2d(h, self.proj_w, 1, 0), train)
        if self.skip:
            h = tc.add(h, x)
        return h

    def parameters(self):
        params = []
        if self.expand is not None:
            w, bn = self.expand
            params.append(("expand.w", w))
            params += [(f"expand.bn.{n}", t) for n, t in bn.parameters()]
        params.append(("dw.w", self.dw_w))
        params += [(f"dw.bn.{n}", t) for n, t in self.dw_bn.parameters()]
        params += [
            ("se.w1", self.se_w1),
            ("se.b1", self.se_b1),
            ("se.w2", self.se_w2),
            ("se.b2", self.se_b2),
        ]
        params.append(("proj.w", self.proj_w))
        params += [(f"proj.bn.{n}", t) for n, t in self.proj_bn.parameters()]
        return params

    def buffers(self):
        bufs = []
        if self.expand is not None:
            _, bn = self.expand
            bufs += [(f"expand.bn.{n}", b) for n, b in bn.buffers()]
        bufs += [(f"dw.bn.{n}", b) for n, b in self.dw_bn.buffers()]
        bufs += [(f"proj.bn.{n}", b) for n, b in self.proj_bn.buffers()]
        return bufs


class Backbone:
    """Stage sequence ending in global average pooling over the final features."""

    def __init__(self, spec: ScaledSpec, in_channels: int = 1, seed: int = 0,
                 dtype=np.float32):
        if spec.input_resolution < 8:
            raise ConfigError(
                f"input resolution {spec.input_resolution} too small for the stride chain"
            )
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.in_channels = in_channels
        self.dtype = dtype
        self.layers: list[tuple[str, object]] = []
        prev_c = in_channels
        for si, st in enumerate(spec.stages):
            for li in range(st.layers):
                stride = st.stride if li == 0 else 1
                cin = prev_c if li == 0 else st.channels
                name = f"stage{si + 1}.layer{li}"
                if st.kind == "conv":
                    layer = ConvBNAct(cin, st.channels, st.kernel, stride, rng, dtype)
                else:
                    layer = MBConvBlock(
                        cin, st.channels, st.kernel, stride, st.expansion, rng, dtype
                    )
                self.layers.append((name, layer))
            prev_c = st.channels
        self.trunk_width = spec.stages[-1].channels

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        for _, layer in self.layers:
            x = layer.forward(x, train)
        n, c = x.data.shape[0], x.data.shape[1]
        return tc.reshape(tc.global_avg_pool(x), (n, c))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            (f"{name}.{pname}", t)
            for name, layer in self.layers
            for pname, t in layer.parameters()
        ]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [
            (f"{name}.{bname}", b)
            for name, layer in self.layers
            for bname, b in layer.buffers()
        ]


def build_backbone(spec: ScaledSpec, in_channels: int = 1, seed: int = 0,
                   dtype=np.float32) -> Backbone:
    return Backbone(spec, in_channels=in_channels, seed=seed, dtype=dtype)


# --- coefficient search ----------------------------------------------------------


def grid_search_coefficients(
    base: NetworkSpec,
    candidate_grid,
    eval_fn,
    tolerance: float = 0.1,
    channel_divisor: int = 8,
) -> ScalingCoefficients:
    """Best constraint-satisfying (alpha, beta, gamma) at phi = 1.

    eval_fn scores a ScaledSpec (higher is better). Ties break toward lower
    estimated FLOPS, then lexicographic (alpha, beta, gamma).
    """
    candidates = []
    for alpha, beta, gamma in candidate_grid:
        c = ScalingCoefficients(alpha=alpha, beta=beta, gamma=gamma, phi=1.0)
        if not check_constraint(c, tolerance):
            continue
        scaled = apply_compound_scaling(base, c, channel_divisor)
        score = eval_fn(scaled)
        flops = estimate_flops(scaled)
        candidates.append((-score, flops, (alpha, beta, gamma), c))
    if not candidates:
        raise ConfigError("no grid point satisfies the scaling constraint")
    candidates.sort(key=lambda item: (item[0], item[1], item[2]))
    return candidates[0][3]


# --- config document round trip ---------------------------------------------------


def network_to_doc(spec: NetworkSpec) -> dict:
    return {
        "input_resolution": spec.input_resolution,
        "stages": _stages_to_doc(spec.stages),
    }


def network_from_doc(doc: dict) -> NetworkSpec:
    try:
        res = int(doc["input_resolution"])
        if "stages" not in doc or doc["stages"] is None:
            return table1_spec(res)
        stages = tuple(
            StageSpec(
                kind=str(st["kind"]),
                expansion=int(st.get("expansion", 1)),
                kernel=int(st["kernel"]),
                channels=int(st["channels"]),
                layers=int(st["layers"]),
                stride=int(st["stride"]),
                resolution=int(st["resolution"]),
            )
            for st in doc["stages"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed network document: {exc}") from exc
    return NetworkSpec(stages=stages, input_resolution=res)


def coefficients_to_doc(c: ScalingCoefficients, channel_divisor: int = 8) -> dict:
    return {
        "alpha": c.alpha,
        "beta": c.beta,
        "gamma": c.gamma,
        "phi": c.phi,
        "channel_divisor": channel_divisor,
    }


def coefficients_from_doc(doc: dict) -> tuple[ScalingCoefficients, int]:
    try:
        c = ScalingCoefficients(
            alpha=float(doc["alpha"]),
            beta=float(doc["beta"]),
            gamma=float(doc["gamma"]),
            phi=float(doc["phi"]),
        )
        divisor = int(doc.get("channel_divisor", 8))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed scaling document: {exc}") from exc
    return c, divisor


def _stages_to_doc(stages) -> list:
    return [
        {
            "kind": st.kind,
            "expansion": st.expansion,
            "kernel": st.kernel,
            "channels": st.channels,
            "layers": st.layers,
            "stride": st.stride,
            "resolution": st.resolution,
        }
        for st in stages
    ]


def scaled_to_doc(spec: ScaledSpec, channel_divisor: int = 8) -> dict:
    return {
        "input_resolution": spec.input_resolution,
        "stages": _stages_to_doc(spec.stages),
        "coefficients": coefficients_to_doc(spec.coefficients, channel_divisor),
    }


def scaled_from_doc(doc: dict) -> ScaledSpec:
    try:
        c, _ = coefficients_from_doc(doc["coefficients"])
        stages = tuple(
            StageSpec(
                kind=str(st["kind"]),
                expansion=int(st.get("expansion", 1)),
                kernel=int(st["kernel"]),
                channels=int(st["channels"]),
                layers=int(st["layers"]),
                stride=int(st["stride"]),
                resolution=int(st["resolution"]),
            )
            for st in doc["stages"]
        )
        res = int(doc["input_resolution"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed scaled-spec document: {exc}") from exc
    return ScaledSpec(stages=stages, input_resolution=res, coefficients=c)
