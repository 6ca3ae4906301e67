"""DeepConvNet, ShallowConvNet and EEGNet layer stacks, the subepoch-wise
feature encoder (SEFE) attachment, and a parameter audit.

Backbone hyperparameters default to the original architecture definitions
for 250 Hz input; every one of them can be overridden through
``ArchitectureConfig.hparams``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .nn import (
    LayerSpec,
    activation,
    avg_pool,
    batch_norm,
    conv2d,
    count_params,
    dense,
    dropout,
    flatten,
    infer_shapes,
    max_pool,
)
from .nn.layers import ShapeError

BACKBONES = ("deep", "shallow", "eegnet")
BACKBONE_TITLES = {"deep": "DeepConvNet", "shallow": "ShallowConvNet", "eegnet": "EEGNet"}

DEFAULT_HPARAMS: dict[str, dict[str, Any]] = {
    "deep": {
        "n_filters_time": 25,
        "n_filters_spat": 25,
        "block_filters": (50, 100, 200),
        "kernel_len": 10,
        "pool_len": 3,
        "pool_stride": 3,
        "dropout": 0.5,
    },
    "shallow": {
        "n_filters_time": 40,
        "n_filters_spat": 40,
        "kernel_len": 25,
        "pool_len": 75,
        "pool_stride": 15,
        "dropout": 0.5,
    },
    "eegnet": {
        "F1": 8,
        "D": 2,
        "F2": 16,
        "kernel_len": 125,
        "sep_kernel_len": 16,
        "pool1": 4,
        "pool2": 8,
        "dropout": 0.25,
    },
}

# parameter totals published for the six decoding models
TABLE_IV = {
    ("deep", False): 108_485,
    ("deep", True): 318_669,
    ("shallow", False): 103_520,
    ("shallow", True): 108_224,
    ("eegnet", False): 3_400,
    ("eegnet", True): 9_832,
}


@dataclass(frozen=True)
class SefeConfig:
    hidden_channels: int = 64
    output_channels: int = 32
    kernel: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if tuple(self.kernel) != (1, 1):
            raise ValueError("the SEFE kernel must be exactly 1x1")
        if self.hidden_channels < 1 or self.output_channels < 1:
            raise ValueError("SEFE channel counts must be positive")


@dataclass(frozen=True)
class ArchitectureConfig:
    backbone: str = "eegnet"
    n_channels: int = 64
    n_samples: int = 1000
    n_classes: int = 3
    with_sefe: bool = False
    hparams: dict = field(default_factory=dict)
    sefe: SefeConfig = SefeConfig()

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.n_channels < 1 or self.n_samples < 1:
            raise ValueError("n_channels and n_samples must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        unknown = set(self.hparams) - set(DEFAULT_HPARAMS[self.backbone])
        if unknown:
            raise ValueError(f"unknown {self.backbone} hyperparameters: {sorted(unknown)}")

    @property
    def resolved_hparams(self) -> dict[str, Any]:
        return {**DEFAULT_HPARAMS[self.backbone], **self.hparams}

    @property
    def model_label(self) -> str:
        return f"{self.backbone}_{'sefe' if self.with_sefe else 'nosefe'}"

    @property
    def title(self) -> str:
        return f"{BACKBONE_TITLES[self.backbone]} w{'/' if self.with_sefe else '/o'} SEFE"

    def variant(self, **changes) -> "ArchitectureConfig":
        fields = dict(backbone=self.backbone, n_channels=self.n_channels, n_samples=self.n_samples,
                      n_classes=self.n_classes, with_sefe=self.with_sefe,
                      hparams=dict(self.hparams), sefe=self.sefe)
        fields.update(changes)
        return ArchitectureConfig(**fields)


def parse_model_label(label: str) -> tuple[str, bool]:
    """``'deep_sefe'`` -> ``('deep', True)``; also accepts ``deep-nosefe``."""
    backbone, _, variant = label.replace("-", "_").partition("_")
    if backbone not in BACKBONES or variant not in ("sefe", "nosefe"):
        raise ValueError(f"model must be <{'|'.join(BACKBONES)}>_<sefe|nosefe>, got {label!r}")
    return backbone, variant == "sefe"


def _time_after(n, kernel, pool, stride):
    n = n - kernel + 1
    if n < pool:
        return None
    return (n - pool) // stride + 1


def _deep_min_samples(hp) -> int:
    n = 1
    while True:
        t = n
        for _ in range(4):
            t = _time_after(t, hp["kernel_len"], hp["pool_len"], hp["pool_stride"]) if t else None
            if not t:
                break
        if t:
            return n
        n += 1


def build_deepconvnet(cfg: ArchitectureConfig) -> list[LayerSpec]:
    if cfg.backbone != "deep":
        raise ValueError("build_deepconvnet needs backbone='deep'")
    hp = cfg.resolved_hparams
    k, pool, stride = hp["kernel_len"], hp["pool_len"], hp["pool_stride"]
    min_len = _deep_min_samples(hp)
    if cfg.n_samples < min_len:
        raise ValueError(
            f"DeepConvNet needs at least {min_len} samples for four conv/pool stages, got {cfg.n_samples}"
        )
    f_time, f_spat = hp["n_filters_time"], hp["n_filters_spat"]
    stack = [
        conv2d(1, f_time, (1, k), name="conv_time"),
        conv2d(f_time, f_spat, (cfg.n_channels, 1), name="conv_spat"),
        batch_norm(f_spat, name="bn1"),
        activation("elu", name="elu1"),
        max_pool((1, pool), (1, stride), name="pool1"),
        dropout(hp["dropout"], name="drop1"),
    ]
    c = f_spat
    for b, f in enumerate(hp["block_filters"], start=2):
        stack += [
            conv2d(c, f, (1, k), name=f"conv{b}"),
            batch_norm(f, name=f"bn{b}"),
            activation("elu", name=f"elu{b}"),
            max_pool((1, pool), (1, stride), name=f"pool{b}"),
            dropout(hp["dropout"], name=f"drop{b}"),
        ]
        c = f
    return _with_classifier(stack, cfg)


def build_shallowconvnet(cfg: ArchitectureConfig) -> list[LayerSpec]:
    if cfg.backbone != "shallow":
        raise ValueError("build_shallowconvnet needs backbone='shallow'")
    hp = cfg.resolved_hparams
    f_time, f_spat = hp["n_filters_time"], hp["n_filters_spat"]
    stack = [
        conv2d(1, f_time, (1, hp["kernel_len"]), name="conv_time"),
        conv2d(f_time, f_spat, (cfg.n_channels, 1), name="conv_spat"),
        batch_norm(f_spat, name="bn1"),
        activation("square", name="square"),
        avg_pool((1, hp["pool_len"]), (1, hp["pool_stride"]), name="pool1"),
        activation("safelog", name="log"),
        dropout(hp["dropout"], name="drop1"),
    ]
    return _with_classifier(stack, cfg)


def build_eegnet(cfg: ArchitectureConfig) -> list[LayerSpec]:
    if cfg.backbone != "eegnet":
        raise ValueError("build_eegnet needs backbone='eegnet'")
    hp = cfg.resolved_hparams
    f1, d, f2 = hp["F1"], hp["D"], hp["F2"]
    stack = [
        conv2d(1, f1, (1, hp["kernel_len"]), padding="same", bias=False, name="conv_time"),
        batch_norm(f1, name="bn1"),
        conv2d(f1, f1 * d, (cfg.n_channels, 1), groups=f1, bias=False, name="conv_depth"),
        batch_norm(f1 * d, name="bn2"),
        activation("elu", name="elu1"),
        avg_pool((1, hp["pool1"]), name="pool1"),
        dropout(hp["dropout"], name="drop1"),
        conv2d(f1 * d, f1 * d, (1, hp["sep_kernel_len"]), padding="same", groups=f1 * d,
               bias=False, name="sep_depth"),
        conv2d(f1 * d, f2, (1, 1), bias=False, name="sep_point"),
        batch_norm(f2, name="bn3"),
        activation("elu", name="elu2"),
        avg_pool((1, hp["pool2"]), name="pool2"),
        dropout(hp["dropout"], name="drop2"),
    ]
    return _with_classifier(stack, cfg)


def _with_classifier(features: list[LayerSpec], cfg: ArchitectureConfig) -> list[LayerSpec]:
    shapes = infer_shapes(features, (1, cfg.n_channels, cfg.n_samples))
    n_feat = shapes[-1][0] * shapes[-1][1] * shapes[-1][2]
    stack = features + [flatten(name="flatten"), dense(n_feat, cfg.n_classes, name="classifier")]
    if cfg.with_sefe:
        stack = attach_sefe(stack, cfg.sefe)
    return stack


BUILDERS = {"deep": build_deepconvnet, "shallow": build_shallowconvnet, "eegnet": build_eegnet}


def build(cfg: ArchitectureConfig) -> list[LayerSpec]:
    return BUILDERS[cfg.backbone](cfg)


def feature_map_shape(stack: list[LayerSpec]) -> tuple[int, int]:
    """``(C_f, spatial_extent)`` of the map entering ``flatten``.

    The channel count is that of the last convolution; the remaining
    extent is the classifier input divided by it (time positions when the
    electrode axis has been collapsed).
    """
    if len(stack) < 2 or stack[-2].kind != "flatten" or stack[-1].kind != "dense":
        raise ValueError("stack does not end with a flatten + dense classifier")
    convs = [s for s in stack[:-2] if s.kind == "conv2d"]
    if not convs:
        raise ValueError("stack has no convolutional feature extractor")
    c_f = convs[-1].out_channels
    n_feat = stack[-1].in_features
    if n_feat % c_f:
        raise ValueError(f"classifier input {n_feat} is not a multiple of {c_f} channels")
    return c_f, n_feat // c_f


def attach_sefe(stack: list[LayerSpec], sefe: SefeConfig = SefeConfig()) -> list[LayerSpec]:
    """Insert conv1x1(C_f->64) -> ReLU -> conv1x1(64->32) before flatten.

    The 1x1 convolutions act on each temporal position of the final
    feature map separately; the dense input shrinks or grows to 32 * T_f.
    """
    c_f, extent = feature_map_shape(stack)
    if any(s.name.startswith("sefe_") for s in stack):
        raise ValueError("stack already has a SEFE block")
    head = list(stack[:-2])
    classifier = stack[-1]
    block = [
        conv2d(c_f, sefe.hidden_channels, (1, 1), name="sefe_conv1"),
        activation("relu", name="sefe_relu"),
        conv2d(sefe.hidden_channels, sefe.output_channels, (1, 1), name="sefe_conv2"),
    ]
    new_dense = dense(sefe.output_channels * extent, classifier.out_features,
                      bias=classifier.bias, name=classifier.name)
    return head + block + [stack[-2], new_dense]


def sefe_increment(c_f: int, t_f: int, n_classes: int, sefe: SefeConfig = SefeConfig()) -> int:
    """Closed-form parameter increase from attaching SEFE."""
    h, o = sefe.hidden_channels, sefe.output_channels
    return (c_f * h + h) + (h * o + o) + (o - c_f) * t_f * n_classes


@dataclass
class AuditRow:
    model: str
    layers: list[tuple[str, str, tuple, int]]
    total: int
    reference: int

    @property
    def deviation(self) -> float:
        return (self.total - self.reference) / self.reference


@dataclass
class AuditReport:
    backbone: str
    without: AuditRow
    with_sefe: AuditRow
    delta: int
    closed_form_delta: int
    feature_map: tuple[int, int]

    @property
    def reference_delta(self) -> int:
        return self.with_sefe.reference - self.without.reference

    def rows(self):
        return [self.without, self.with_sefe]


def _layer_ledger(stack):
    from .nn.network import _param_shapes, layer_names

    per_layer, total = count_params(stack)
    entries = []
    for name, spec, n in zip(layer_names(stack), stack, per_layer):
        shapes = tuple(_param_shapes(spec).values())
        entries.append((name, spec.kind, shapes, n))
    return entries, total


def audit_parameters(cfg: ArchitectureConfig) -> AuditReport:
    plain = build(cfg.variant(with_sefe=False))
    with_sefe = build(cfg.variant(with_sefe=True))
    c_f, t_f = feature_map_shape(plain)
    rows = []
    for flag, stack in ((False, plain), (True, with_sefe)):
        ledger, total = _layer_ledger(stack)
        rows.append(AuditRow(cfg.variant(with_sefe=flag).model_label, ledger, total,
                             TABLE_IV[(cfg.backbone, flag)]))
    return AuditReport(
        backbone=cfg.backbone,
        without=rows[0],
        with_sefe=rows[1],
        delta=rows[1].total - rows[0].total,
        closed_form_delta=sefe_increment(c_f, t_f, cfg.n_classes, cfg.sefe),
        feature_map=(c_f, t_f),
    )


def check_input_shape(stack, n_channels, n_samples):
    """Raise ShapeError unless the stack maps (1, n_channels, n_samples) to logits."""
    shapes = infer_shapes(stack, (1, n_channels, n_samples))
    if len(shapes[-1]) != 1:
        raise ShapeError(f"stack output {shapes[-1]} is not a logit vector")
    return shapes
