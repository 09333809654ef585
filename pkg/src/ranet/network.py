"""Executable RANet graphs built from a configuration.

A built :class:`NetworkGraph` is a list of *steps* in zigzag order: the
initial layer (largest scale first), then for every sub-network from the
coarsest up its blocks, transition layers and classifier heads. Running a
prefix of that list is exactly what early-exit inference does, so the cost
of classifier k is the summed cost of the steps up to and including head k.

Every primitive knows its per-sample input and output shape at build time,
which gives each step an exact multiply-accumulate count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .config import validate_config
from .errors import ConfigError, DataError, UsageError
from .planning import DENSE, FUSION_DOWN, plan_fusion_layer, plan_initial_layer, plan_network


@dataclass
class CostRow:
    name: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    params: int
    macs: int
    elementwise: int


def _numel(shape):
    return int(np.prod(shape))


class _Builder:
    """Creates parameters in declaration order from one seeded generator."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.params = []

    def add(self, name, param):
        self.params.append((name, param))
        return param

    def conv_kernel(self, name, c_out, c_in, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        w = self.rng.standard_normal((c_out, c_in, k, k)) * std
        return self.add(name, Parameter(w, "conv-kernel"))


# --- primitives -------------------------------------------------------------


class Conv:
    def __init__(self, b, name, in_shape, c_out, k, stride=1):
        c, h, w = in_shape
        self.name, self.stride, self.pad = name, stride, k // 2
        self.kernel = b.conv_kernel(name + ".kernel", c_out, c, k)
        ho = ad.conv_output_size(h, k, stride, self.pad)
        wo = ad.conv_output_size(w, k, stride, self.pad)
        if ho <= 0 or wo <= 0:
            raise ConfigError(f"{name}: convolution output {ho}x{wo} is not positive")
        self.in_shape, self.out_shape = tuple(in_shape), (c_out, ho, wo)
        self.rows = [CostRow(name, f"conv{k}x{k}/s{stride}", self.in_shape, self.out_shape,
                             self.kernel.size, k * k * c * c_out * ho * wo, 0)]

    def __call__(self, x, training):
        return ad.conv2d(x, self.kernel, self.stride, self.pad)


class BatchNorm:
    def __init__(self, b, name, in_shape):
        c = in_shape[0]
        self.gamma = b.add(name + ".gamma", Parameter(np.ones(c), "bn-gamma"))
        self.beta = b.add(name + ".beta", Parameter(np.zeros(c), "bn-beta"))
        self.in_shape = self.out_shape = tuple(in_shape)
        self.rows = [CostRow(name, "bn", self.in_shape, self.out_shape, 2 * c, 0, _numel(in_shape))]

    def __call__(self, x, training):
        return ad.batch_norm(x, self.gamma, self.beta, training)


class _Elementwise:
    kind = ""

    def __init__(self, name, in_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = self._out(self.in_shape)
        self.rows = [CostRow(name, self.kind, self.in_shape, self.out_shape, 0, 0, self._ops())]

    def _out(self, s):
        return s

    def _ops(self):
        return _numel(self.in_shape)


class ReLU(_Elementwise):
    kind = "relu"

    def __call__(self, x, training):
        return ad.relu(x)


class AvgPool(_Elementwise):
    kind = "avgpool2x2"

    def _out(self, s):
        if s[1] % 2 or s[2] % 2:
            raise ConfigError(f"cannot pool odd spatial size {s[1]}x{s[2]}")
        return (s[0], s[1] // 2, s[2] // 2)

    def __call__(self, x, training):
        return ad.avg_pool_2x2(x)


class Upsample(_Elementwise):
    kind = "upsample2x"

    def _out(self, s):
        return (s[0], s[1] * 2, s[2] * 2)

    def _ops(self):
        return _numel(self.out_shape)

    def __call__(self, x, training):
        return ad.upsample_bilinear_2x(x)


class GlobalPool(_Elementwise):
    kind = "gap"

    def _out(self, s):
        return (s[0], 1, 1)

    def __call__(self, x, training):
        return ad.global_avg_pool(x)


class Linear:
    def __init__(self, b, name, in_shape, c_out):
        d = _numel(in_shape)
        w = b.rng.standard_normal((c_out, d)) * np.sqrt(1.0 / d)
        self.weight = b.add(name + ".weight", Parameter(w, "linear-weight"))
        self.bias = b.add(name + ".bias", Parameter(np.zeros(c_out), "linear-bias"))
        self.in_shape, self.out_shape = tuple(in_shape), (c_out,)
        self.rows = [CostRow(name, "linear", self.in_shape, self.out_shape, d * c_out + c_out, d * c_out, 0)]

    def __call__(self, x, training):
        return ad.linear(x, self.weight, self.bias)


class Seq:
    """Chain of primitives; each constructor gets the previous output shape."""

    def __init__(self, in_shape, makers):
        self.ops = []
        shape = tuple(in_shape)
        for make in makers:
            op = make(shape)
            self.ops.append(op)
            shape = op.out_shape
        self.in_shape, self.out_shape = tuple(in_shape), shape

    @property
    def rows(self):
        return [r for op in self.ops for r in op.rows]

    def __call__(self, x, training):
        for op in self.ops:
            x = op(x, training)
        return x


def bn_relu_conv(b, name, c_out, k, stride=1):
    return [
        lambda s: BatchNorm(b, name + ".bn", s),
        lambda s: ReLU(name + ".relu", s),
        lambda s: Conv(b, name + ".conv", s, c_out, k, stride),
    ]


def regular_conv(b, name, in_shape, c_out, bottleneck, stride=1, upsample=False):
    """Bottleneck 1x1 then 3x3 (stride 2 makes it a Strided-Conv), each BN-ReLU-Conv.

    Callers size ``bottleneck`` as min(multiplier * c_out, input channels).
    """
    makers = bn_relu_conv(b, name + ".1", bottleneck, 1) + bn_relu_conv(b, name + ".2", c_out, 3, stride)
    if upsample:
        makers.append(lambda s: Upsample(name + ".up", s))
    return Seq(in_shape, makers)


def transition(b, name, in_shape, c_out):
    return Seq(in_shape, [
        lambda s: Conv(b, name + ".conv", s, c_out, 1),
        lambda s: BatchNorm(b, name + ".bn", s),
        lambda s: ReLU(name + ".relu", s),
    ])


def classifier_head(b, name, in_shape, num_classes):
    return Seq(in_shape, [
        lambda s: BatchNorm(b, name + ".bn", s),
        lambda s: ReLU(name + ".relu", s),
        lambda s: GlobalPool(name + ".gap", s),
        lambda s: Linear(b, name + ".fc", s, num_classes),
    ])


# --- dense and fusion layers -------------------------------------------------


class DenseLayer:
    def __init__(self, b, name, in_shape, growth, bottleneck):
        self.new = regular_conv(b, name, in_shape, growth, bottleneck)
        self.in_shape = tuple(in_shape)
        self.out_shape = (in_shape[0] + growth,) + tuple(in_shape[1:])
        self.plan = None

    @property
    def rows(self):
        return self.new.rows

    def __call__(self, state, source, training):
        return ad.concat_channels([state, self.new(state, training)])


class FusionLayer:
    """Dense layer that also ingests the matching state of the previous sub-network.

    keep: ``[state, RegularConv(state), T(source)]`` at the current scale.
    down: ``[pool(state), StridedConv(state), T(source)]`` at half resolution.
    ``T`` is Up-Conv, Regular-Conv or Strided-Conv depending on the scale
    gap between the source and the layer output.
    """

    def __init__(self, b, name, in_shape, source_shape, plan, bottleneck_mult):
        self.plan = plan
        down = plan.kind == "down"
        bw = min(bottleneck_mult * plan.current_out, in_shape[0])
        self.current = regular_conv(b, name + ".cur", in_shape, plan.current_out, bw, stride=2 if down else 1)
        self.pool = AvgPool(name + ".pool", in_shape) if down else None
        sbw = min(bottleneck_mult * plan.source_out, source_shape[0])
        t = plan.source_transform
        self.source = regular_conv(b, name + ".src", source_shape, plan.source_out, sbw,
                                   stride=2 if t == "strided" else 1, upsample=t == "up")
        target_hw = self.current.out_shape[1:]
        if self.source.out_shape[1:] != target_hw:
            raise ConfigError(f"{name}: fused source {self.source.out_shape} does not match {self.current.out_shape}")
        self.in_shape = tuple(in_shape)
        self.out_shape = (plan.out_channels,) + tuple(target_hw)

    @property
    def rows(self):
        r = self.current.rows
        if self.pool is not None:
            r = self.pool.rows + r
        return r + self.source.rows

    def __call__(self, state, source, training):
        kept = self.pool(state, training) if self.pool is not None else state
        return ad.concat_channels([kept, self.current(state, training), self.source(source, training)])


class Block:
    def __init__(self, plan, layers):
        self.plan = plan
        self.layers = layers
        self.in_shape = layers[0].in_shape
        self.out_shape = layers[-1].out_shape

    @property
    def rows(self):
        return [r for layer in self.layers for r in layer.rows]


# --- graph -------------------------------------------------------------------


@dataclass
class Step:
    """One unit of zigzag execution: a base feature, block, transition or head."""

    kind: str
    key: tuple
    unit: object
    rows: list = field(repr=False)

    @property
    def macs(self):
        return sum(r.macs for r in self.rows)

    @property
    def elementwise(self):
        return sum(r.elementwise for r in self.rows)


class NetworkGraph:
    def __init__(self, validated, base_plans, block_plans, steps, params, heads):
        self.validated = validated
        self.config = validated.config
        self.base_plans = base_plans
        self.block_plans = block_plans
        self.steps = steps
        self.params = params
        self.heads = heads  # classifier k (1-based) -> (subnet, block)
        self._head_step = [i for i, s in enumerate(steps) if s.kind == "head"]
        self._prefix_macs = np.cumsum([s.macs for s in steps]).tolist()
        self._prefix_elem = np.cumsum([s.elementwise for s in steps]).tolist()

    @property
    def num_classifiers(self):
        return len(self.heads)

    def parameters(self):
        return [p for _, p in self.params]

    def named_parameters(self):
        return list(self.params)

    def num_parameters(self):
        return sum(p.size for _, p in self.params)

    def head_step_index(self, k):
        if not 1 <= k <= self.num_classifiers:
            raise UsageError(f"classifier index {k} outside [1, {self.num_classifiers}]")
        return self._head_step[k - 1]

    def count_flops(self, k):
        """Multiply-accumulates needed to produce classifier ``k``'s output."""
        return int(self._prefix_macs[self.head_step_index(k)])

    def count_elementwise(self, k):
        return int(self._prefix_elem[self.head_step_index(k)])

    def prefix_costs(self):
        return [self.count_flops(k) for k in range(1, self.num_classifiers + 1)]

    def rows(self):
        return [r for s in self.steps for r in s.rows]

    def summary(self):
        """Layer table as text: name, kind, shapes, parameters and MACs."""
        header = f"{'name':<34} {'kind':<12} {'in':<14} {'out':<14} {'params':>9} {'MACs':>12} {'elementwise':>12}"
        lines = [f"# {self.config.name}: {self.num_classifiers} classifiers, "
                 f"{self.num_parameters()} parameters, {self.count_flops(self.num_classifiers)} MACs", header]
        fmt = lambda s: "x".join(str(v) for v in s)
        for step in self.steps:
            lines.append(f"## {step.kind} {'.'.join(str(v) for v in step.key)}: {step.macs} MACs")
            for r in step.rows:
                lines.append(f"{r.name:<34} {r.kind:<12} {fmt(r.in_shape):<14} {fmt(r.out_shape):<14} "
                             f"{r.params:>9} {r.macs:>12} {r.elementwise:>12}")
        for k in range(1, self.num_classifiers + 1):
            h, j = self.heads[k - 1]
            lines.append(f"classifier {k} (sub-network {h}, block {j}): {self.count_flops(k)} MACs")
        return "\n".join(lines) + "\n"


def build_graph(cfg, seed=0):
    """Instantiate every layer of ``cfg`` with freshly initialised parameters."""
    vc = validate_config(cfg)
    cfg = vc.config
    b = _Builder(seed)
    mult = cfg.bottleneck_multiplier
    steps = []

    base_plans = plan_initial_layer(cfg)
    base_shape = {}
    for bp in base_plans:
        if bp.source == "image":
            in_shape = (cfg.input_channels,) + tuple(cfg.input_resolution)
        else:
            in_shape = base_shape[bp.source]
        bw = min(mult * bp.out_channels, in_shape[0])
        unit = regular_conv(b, f"base{bp.subnet}", in_shape, bp.out_channels, bw,
                            stride=2 if bp.conv == "strided" else 1)
        if unit.out_shape[1:] != bp.resolution:
            raise ConfigError(f"base feature {bp.subnet} has resolution {unit.out_shape[1:]}, expected {bp.resolution}")
        base_shape[bp.subnet] = unit.out_shape
        steps.append(Step("base", (bp.subnet,), unit, unit.rows))

    block_plans = plan_network(cfg)
    state_shapes = {}
    heads = []
    for h, plans in enumerate(block_plans, start=1):
        g = cfg.growth_rates[h - 1]
        shape = base_shape[h]
        for bp in plans:
            prefix = f"s{h}.b{bp.index}"
            layers = []
            prev = block_plans[h - 2][bp.index - 1] if bp.fusion_source else None
            for i in range(1, bp.layers + 1):
                name = f"{prefix}.l{i}"
                if bp.kind == DENSE:
                    layer = DenseLayer(b, name, shape, g, min(mult * g, shape[0]))
                else:
                    src_shape = state_shapes[(h - 1, bp.index, i)]
                    gap = bp.layer_scale(i) - prev.layer_scale(i)
                    kind = "down" if bp.kind == FUSION_DOWN and i == bp.layers else "keep"
                    fp = plan_fusion_layer(kind, shape[0], src_shape[0], g, cfg.fusion_compression, gap)
                    layer = FusionLayer(b, name, shape, src_shape, fp, mult)
                layers.append(layer)
                shape = layer.out_shape
                state_shapes[(h, bp.index, i)] = shape
            block = Block(bp, layers)
            steps.append(Step("block", (h, bp.index), block, block.rows))
            if bp.transition_after:
                c_out = max(1, int(shape[0] * cfg.transition_compression))
                unit = transition(b, f"{prefix}.trans", shape, c_out)
                shape = unit.out_shape
                steps.append(Step("transition", (h, bp.index), unit, unit.rows))
            if bp.classifier_after:
                heads.append((h, bp.index))
                k = len(heads)
                unit = classifier_head(b, f"head{k}", shape, cfg.num_classes)
                steps.append(Step("head", (k,), unit, unit.rows))
    return NetworkGraph(vc, base_plans, block_plans, steps, b.params, heads)


class Execution:
    """Lazy zigzag execution of one input batch through a graph.

    Holds the feature cache: base features, the running stream of every
    sub-network and every layer state (needed by the next sub-network's
    fusion blocks). Steps run strictly in graph order.
    """

    def __init__(self, graph, x, training=False):
        cfg = graph.config
        data = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
        expected = (cfg.input_channels,) + tuple(cfg.input_resolution)
        if data.ndim != 4 or tuple(data.shape[1:]) != expected:
            raise DataError(f"input batch must have shape (N, {', '.join(map(str, expected))}), got {data.shape}")
        self.graph = graph
        self.x = x if isinstance(x, ad.Tensor) else ad.Tensor(data)
        self.training = training
        self.position = 0
        self.base = {}
        self.stream = {}
        self.layer_states = {}
        self.logits = {}
        self.executed = []
        self.macs = 0

    def step(self):
        st = self.graph.steps[self.position]
        t = self.training
        if st.kind == "base":
            h = st.key[0]
            plan = next(p for p in self.graph.base_plans if p.subnet == h)
            src = self.x if plan.source == "image" else self.base[plan.source]
            self.base[h] = self.stream[h] = st.unit(src, t)
        elif st.kind == "block":
            h, j = st.key
            state = self.stream[h]
            for i, layer in enumerate(st.unit.layers, start=1):
                source = self.layer_states.get((h - 1, j, i)) if st.unit.plan.kind != DENSE else None
                state = layer(state, source, t)
                self.layer_states[(h, j, i)] = state
            self.stream[h] = state
        elif st.kind == "transition":
            h = st.key[0]
            self.stream[h] = st.unit(self.stream[h], t)
        else:
            k = st.key[0]
            h, _ = self.graph.heads[k - 1]
            self.logits[k] = st.unit(self.stream[h], t)
        self.executed.append((st.kind,) + st.key)
        self.macs += st.macs
        self.position += 1
        return st

    def run_to_head(self, k):
        """Execute lazily until classifier ``k`` has produced logits."""
        target = self.graph.head_step_index(k)
        while self.position <= target:
            self.step()
        return self.logits[k]

    def run_all(self):
        return [self.run_to_head(k) for k in range(1, self.graph.num_classifiers + 1)]


def forward_logits(graph, x, training=False):
    """Logit tensors of all K classifiers for batch ``x``."""
    return Execution(graph, x, training).run_all()
