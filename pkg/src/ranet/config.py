"""Architecture configuration, validation and the shipped presets.

All per-sub-network lists are stored in sub-network order: index 0 is
Sub-network 1, which works at the lowest resolution (scale 1). The
published tables list the same quantities from the largest scale down, so
``published_order`` reverses them for display.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass(frozen=True)
class StepMode:
    """How many dense layers each block holds.

    ``even``: every block has ``step`` layers. ``lg`` (linear growth): block
    j of a sub-network has ``base + increment * (j - 1)`` layers, so block j
    has the same depth in every sub-network and layer-wise fusion lines up.
    """

    kind: str = "even"
    step: int = 4
    base: int = 2
    increment: int = 2

    def layers(self, block):
        if self.kind == "even":
            return self.step
        return self.base + self.increment * (block - 1)


@dataclass(frozen=True)
class RANetConfig:
    name: str
    num_scales: int
    base_features: int
    scale_of_base: tuple
    blocks: tuple
    base_channels: tuple
    growth_rates: tuple
    step_mode: StepMode = field(default_factory=StepMode)
    fusion_compression: float = 0.25
    bottleneck_multiplier: int = 4
    transition_compression: float = 0.5
    num_classes: int = 10
    input_resolution: tuple = (32, 32)
    input_channels: int = 3

    def resolution(self, scale):
        """Spatial size (H, W) of feature maps at ``scale``."""
        f = 2 ** (self.num_scales - scale)
        return self.input_resolution[0] // f, self.input_resolution[1] // f

    def published_order(self, field_name):
        """A per-sub-network list ordered largest scale first."""
        return tuple(reversed(getattr(self, field_name)))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {
            "name": self.name,
            "network": {
                "num_scales": self.num_scales,
                "base_features": self.base_features,
                "scale_of_base": list(self.scale_of_base),
                "blocks": list(self.blocks),
                "base_channels": list(self.base_channels),
                "growth_rates": list(self.growth_rates),
                "fusion_compression": self.fusion_compression,
                "bottleneck_multiplier": self.bottleneck_multiplier,
                "transition_compression": self.transition_compression,
            },
            "step_mode": dataclasses.asdict(self.step_mode),
            "data": {
                "num_classes": self.num_classes,
                "input_resolution": list(self.input_resolution),
                "input_channels": self.input_channels,
            },
        }

    @classmethod
    def from_dict(cls, d):
        try:
            net = d["network"]
            data = d.get("data", {})
            step = StepMode(**d.get("step_mode", {}))
            return cls(
                name=str(d.get("name", "custom")),
                num_scales=int(net["num_scales"]),
                base_features=int(net["base_features"]),
                scale_of_base=tuple(int(v) for v in net["scale_of_base"]),
                blocks=tuple(int(v) for v in net["blocks"]),
                base_channels=tuple(int(v) for v in net["base_channels"]),
                growth_rates=tuple(int(v) for v in net["growth_rates"]),
                step_mode=step,
                fusion_compression=float(net.get("fusion_compression", 0.25)),
                bottleneck_multiplier=int(net.get("bottleneck_multiplier", 4)),
                transition_compression=float(net.get("transition_compression", 0.5)),
                num_classes=int(data.get("num_classes", 10)),
                input_resolution=tuple(int(v) for v in data.get("input_resolution", (32, 32))),
                input_channels=int(data.get("input_channels", 3)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed configuration: {exc!r}") from exc

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_yaml(cls, text):
        d = yaml.safe_load(text)
        if not isinstance(d, dict):
            raise ConfigError("configuration file must contain a mapping")
        return cls.from_dict(d)


def load_config(path):
    return RANetConfig.from_yaml(Path(path).read_text())


def save_config(cfg, path):
    Path(path).write_text(cfg.to_yaml())


@dataclass(frozen=True)
class ValidatedConfig:
    """A config plus the structure derived from it (1-based block indices)."""

    config: RANetConfig
    downsample_blocks: tuple
    classifier_blocks: tuple
    transition_blocks: tuple

    @property
    def num_classifiers(self):
        return sum(len(c) for c in self.classifier_blocks)


def fusion_split(growth, compression):
    """Split ``growth`` new channels into (current-path, source-path) counts.

    Current path gets ``round((1 - c) * g)`` (halves round up); both paths
    keep at least one channel whenever ``g >= 2``.
    """
    cur = int((1.0 - compression) * growth + 0.5)
    if growth >= 2:
        cur = min(max(cur, 1), growth - 1)
    return cur, growth - cur


def downsample_positions(blocks, scale_of_base, h):
    """Blocks of sub-network ``h`` (1-based) that end with a downsampling.

    A sub-network starting at scale s needs s - 1 downsamplings; they sit at
    block indices b_{h-1}, b_{h-2}, ..., b_{h-s+1}.
    """
    s = scale_of_base[h - 1]
    if s - 1 > h - 1:
        raise ConfigError(
            f"sub-network {h} starts at scale {s} but only {h - 1} earlier sub-networks "
            "provide downsampling positions"
        )
    return tuple(sorted(blocks[h - 1 - k - 1] for k in range(s - 1)))


def classifier_positions(blocks, h):
    """Classifiers follow each of the last (up to two) plain dense blocks."""
    prev = blocks[h - 2] if h > 1 else 0
    n = min(2, blocks[h - 1] - prev)
    return tuple(range(blocks[h - 1] - n + 1, blocks[h - 1] + 1))


def config_violations(cfg):
    """Every violated invariant as a ``(field, constraint)`` pair."""
    v = []
    H, S = cfg.base_features, cfg.num_scales
    if S < 1:
        v.append(("num_scales", "must be at least 1"))
    if H < max(S, 1):
        v.append(("base_features", "H must be >= S"))
    for name in ("scale_of_base", "blocks", "base_channels", "growth_rates"):
        if len(getattr(cfg, name)) != H:
            v.append((name, f"must have exactly H={H} entries"))
    sc = cfg.scale_of_base
    if sc:
        if sc[0] != 1:
            v.append(("scale_of_base", "Sub-network 1 must work at scale 1 (lowest resolution)"))
        if sc[-1] != S:
            v.append(("scale_of_base", f"the last base feature must be at scale S={S} (input resolution)"))
        if any(b - a not in (0, 1) for a, b in zip(sc, sc[1:])):
            v.append(("scale_of_base", "scales must be non-decreasing in steps of at most 1"))
        if any(not 1 <= s <= S for s in sc):
            v.append(("scale_of_base", f"values must lie in [1, {S}]"))
    b = cfg.blocks
    if b and b[0] < 1:
        v.append(("blocks", "every sub-network needs at least one block"))
    if any(y <= x for x, y in zip(b, b[1:])):
        v.append(("blocks", "b_h must be strictly increasing"))
    if any(c < 1 for c in cfg.base_channels):
        v.append(("base_channels", "all channel counts must be positive"))
    if any(g < 1 for g in cfg.growth_rates):
        v.append(("growth_rates", "all growth rates must be positive"))
    if not 0.0 < cfg.fusion_compression < 1.0:
        v.append(("fusion_compression", "must lie in (0, 1)"))
    if not 0.0 < cfg.transition_compression <= 1.0:
        v.append(("transition_compression", "must lie in (0, 1]"))
    if cfg.bottleneck_multiplier < 1:
        v.append(("bottleneck_multiplier", "must be a positive count"))
    if cfg.num_classes < 2:
        v.append(("num_classes", "need at least two classes"))
    if cfg.input_channels < 1:
        v.append(("input_channels", "must be positive"))
    sm = cfg.step_mode
    if sm.kind not in ("even", "lg"):
        v.append(("step_mode", "kind must be 'even' or 'lg'"))
    elif sm.kind == "even" and sm.step < 1:
        v.append(("step_mode", "even step must be positive"))
    elif sm.kind == "lg" and (sm.base < 1 or sm.increment < 0):
        v.append(("step_mode", "lg needs base >= 1 and increment >= 0"))
    if S >= 1:
        f = 2 ** (S - 1)
        r = cfg.input_resolution
        if len(r) != 2 or r[0] % f or r[1] % f or min(r) < f:
            v.append(("input_resolution", f"resolution not divisible by {f}"))
    if len(cfg.growth_rates) == H and H > 1:
        for h in range(2, H + 1):
            cur, src = fusion_split(cfg.growth_rates[h - 1], cfg.fusion_compression)
            if cur < 1 or src < 1:
                v.append(("growth_rates", f"sub-network {h} growth is too small to split between fusion paths"))
    if not v:
        for h in range(1, H + 1):
            try:
                downsample_positions(b, sc, h)
            except ConfigError as exc:
                v.append(("scale_of_base", str(exc)))
    return v


def validate_config(cfg):
    """Check ``cfg`` and derive its block structure.

    Raises :class:`ConfigError` listing every violation at once.
    """
    violations = config_violations(cfg)
    if violations:
        msg = "; ".join(f"{f}: {c}" for f, c in violations)
        raise ConfigError(f"invalid configuration {cfg.name!r}: {msg}", violations)
    H = cfg.base_features
    downs = tuple(downsample_positions(cfg.blocks, cfg.scale_of_base, h) for h in range(1, H + 1))
    cls = tuple(classifier_positions(cfg.blocks, h) for h in range(1, H + 1))
    trans = tuple(tuple(sorted(set(downs[h]) | {cls[h][0]})) for h in range(H))
    return ValidatedConfig(cfg, downs, cls, trans)


PRESET_NAMES = ("model-c-1", "model-c-2", "model-c-3", "model-i-1", "model-i-2", "mini", "tiny")
_ALIASES = {"model-c-1-mini": "mini"}
# layer counts per block for the two step modes
_PRESET_STEPS = {
    "model-c": {"even": StepMode("even", step=4), "lg": StepMode("lg", base=2, increment=2)},
    "model-i": {"even": StepMode("even", step=8), "lg": StepMode("lg", base=2, increment=2)},
}


def load_preset(name, step_mode=None):
    """Load a shipped configuration by name.

    ``step_mode`` ('even' or 'lg') swaps in the published layer schedule for
    the model family; ``None`` keeps the file's own schedule.
    """
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    text = resources.files("ranet.presets").joinpath(f"{key}.yaml").read_text()
    cfg = RANetConfig.from_yaml(text)
    if step_mode is not None:
        family = "model-i" if key.startswith("model-i") else "model-c"
        if step_mode not in _PRESET_STEPS[family]:
            raise ConfigError(f"unknown step mode {step_mode!r}; use 'even' or 'lg'")
        cfg = cfg.replace(step_mode=_PRESET_STEPS[family][step_mode])
    return cfg


def resolve_config(spec, step_mode=None):
    """Preset name or path to a YAML file."""
    path = Path(spec)
    if path.suffix in (".yaml", ".yml") or path.exists():
        if not path.exists():
            raise ConfigError(f"configuration file {spec} does not exist")
        cfg = load_config(path)
        if step_mode is not None:
            cfg = cfg.replace(step_mode=_PRESET_STEPS["model-c"][step_mode])
        return cfg
    return load_preset(spec, step_mode)
