"""Encoder, pixel-shuffle decoder, the CombNet family and parameter accounting.

Architectures are first described declaratively as a :class:`ModelSpec` (a
list of :class:`LayerSpec` rows) and then materialised. Parameter counts come
from the layer list alone, so the full-resolution baseline with its
134M-weight hidden layer never has to be allocated just to be counted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import CapabilityError, ConfigurationError, ShapeMismatchError, StateError

FULL_RESOLUTION = (64, 512)  # height x width of a normalised iris image
DESK_RESOLUTION = (32, 128)
SIGNATURE_WIDTH = 1024
HIDDEN_WIDTH = 4096


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | bn | relu | pool | shuffle | tel | flatten | fc
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    pool: str = ""

    @property
    def params(self):
        if self.kind == "conv":
            return self.out_channels * self.in_channels * self.kernel ** 2 + self.out_channels
        if self.kind == "fc":
            return self.in_channels * self.out_channels + self.out_channels
        if self.kind == "bn":
            return 2 * self.out_channels
        return 0


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple

    def __iter__(self):
        return iter(self.layers)


@dataclass(frozen=True)
class EncoderSpec:
    pool: str = "eap"
    # (kernel, stride, padding, out_channels) per conv block
    blocks: tuple = ((5, 1, 2, 32), (3, 1, 1, 64), (3, 1, 1, 128), (3, 1, 1, 256))
    in_channels: int = 1

    @property
    def out_channels(self):
        return self.blocks[-1][3]

    @property
    def reduction(self):
        return 2 ** len(self.blocks)

    def layer_specs(self, prefix="encoder"):
        rows, c = [], self.in_channels
        for i, (k, s, p, oc) in enumerate(self.blocks):
            base = f"{prefix}.{i}"
            rows += [
                LayerSpec("conv", f"{base}.conv", c, oc, k, s, p),
                LayerSpec("bn", f"{base}.bn", oc, oc),
                LayerSpec("relu", f"{base}.relu", oc, oc),
                LayerSpec("pool", f"{base}.pool", oc, oc, 2, 2, 0, self.pool),
            ]
            c = oc
        return rows


@dataclass(frozen=True)
class DecoderSpec:
    stages: int = 4
    factor: int = 2
    in_channels: int = 256

    def layer_specs(self, prefix="decoder"):
        rows, c = [], self.in_channels
        for i in range(self.stages):
            oc = c // self.factor ** 2
            rows.append(LayerSpec("shuffle", f"{prefix}.{i}", c, oc, self.factor))
            c = oc
        return rows


@dataclass(frozen=True)
class CombNetVariant:
    pool: str = "eap"
    head: str = "tel"  # "tel" or "fc"
    init: str = "pretrained"  # "random" or "pretrained"
    hidden: int = HIDDEN_WIDTH
    signature_width: int = SIGNATURE_WIDTH

    def __post_init__(self):
        if self.pool not in ("max", "eap"):
            raise ConfigurationError(f"unknown pooling kind {self.pool!r}")
        if self.head not in ("tel", "fc"):
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.init not in ("random", "pretrained"):
            raise ConfigurationError(f"unknown init {self.init!r}")

    @property
    def encoder(self):
        return EncoderSpec(pool=self.pool)

    @property
    def name(self):
        base = "CombNet_R" if self.init == "random" else "CombNet_E"
        tags = (["EAP"] if self.pool == "eap" else []) + (["TEL"] if self.head == "tel" else [])
        return base + ("^" + "+".join(tags) if tags else "")


VARIANTS = {
    "CombNet_R": CombNetVariant(pool="max", head="fc", init="random"),
    "CombNet_E": CombNetVariant(pool="max", head="fc", init="pretrained"),
    "CombNet_E^EAP": CombNetVariant(pool="eap", head="fc", init="pretrained"),
    "CombNet_E^EAP+TEL": CombNetVariant(pool="eap", head="tel", init="pretrained"),
}


def combnet_spec(variant, num_classes, input_hw=FULL_RESOLUTION):
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    enc = variant.encoder
    h, w = input_hw
    if h % enc.reduction or w % enc.reduction:
        raise ConfigurationError(f"input {h}x{w} not divisible by {enc.reduction}")
    rows = enc.layer_specs()
    c = enc.out_channels
    if variant.head == "tel":
        s = variant.signature_width
        rows += [
            LayerSpec("conv", "head.conv", c, s, 3, 1, 1),
            LayerSpec("bn", "head.bn", s, s),
            LayerSpec("relu", "head.relu", s, s),
            LayerSpec("tel", "head.tel", s, s),
            LayerSpec("fc", "head.fc", s, num_classes),
        ]
    else:
        flat = c * (h // enc.reduction) * (w // enc.reduction)
        rows += [
            LayerSpec("flatten", "head.flatten", flat, flat),
            LayerSpec("fc", "head.fc1", flat, variant.hidden),
            LayerSpec("relu", "head.relu", variant.hidden, variant.hidden),
            LayerSpec("fc", "head.fc2", variant.hidden, num_classes),
        ]
    return ModelSpec(variant.name, tuple(rows))


@dataclass
class ParamReport:
    layers: list = field(default_factory=list)  # (name, kind, count)

    @property
    def total(self):
        return sum(n for _, _, n in self.layers)

    @property
    def by_kind(self):
        out = {"conv": 0, "bn": 0, "fc": 0}
        for _, kind, n in self.layers:
            out[kind] = out.get(kind, 0) + n
        return out

    def table(self):
        lines = [f"{'layer':<20} {'kind':<6} {'params':>14}"]
        lines += [f"{name:<20} {kind:<6} {n:>14,}" for name, kind, n in self.layers]
        kinds = self.by_kind
        lines.append(f"{'conv':<27} {kinds['conv']:>14,}")
        lines.append(f"{'bn':<27} {kinds['bn']:>14,}")
        lines.append(f"{'fc':<27} {kinds['fc']:>14,}")
        lines.append(f"{'total':<27} {self.total:>14,}")
        return "\n".join(lines)


def count_params(model):
    """Learnable parameter count of a :class:`ModelSpec` or a built module.

    BatchNorm contributes gamma and beta only; running statistics are buffers.
    """
    report = ParamReport()
    if isinstance(model, ModelSpec):
        for row in model:
            if row.kind in ("conv", "bn", "fc"):
                report.layers.append((row.name, row.kind, row.params))
        return report
    groups = {}
    for name, p in model.named_parameters():
        owner = name.rsplit(".", 1)[0]
        groups.setdefault(owner, [0, None])
        groups[owner][0] += p.size
    kinds = _module_kinds(model)
    for owner, (n, _) in groups.items():
        report.layers.append((owner, kinds.get(owner, "other"), n))
    return report


def _module_kinds(module, prefix=""):
    kinds = {}
    for name, child in module.children():
        full = prefix + name
        if isinstance(child, L.Conv2d):
            kinds[full] = "conv"
        elif isinstance(child, L.BatchNorm2d):
            kinds[full] = "bn"
        elif isinstance(child, L.Linear):
            kinds[full] = "fc"
        kinds.update(_module_kinds(child, full + "."))
    return kinds


# ---------------------------------------------------------------------------
# materialisation
# ---------------------------------------------------------------------------

def _materialise(rows, rng):
    built = []
    for row in rows:
        if row.kind == "conv":
            built.append(L.Conv2d(row.in_channels, row.out_channels, row.kernel,
                                  row.stride, row.padding, rng=rng))
        elif row.kind == "bn":
            built.append(L.BatchNorm2d(row.out_channels))
        elif row.kind == "relu":
            built.append(L.ReLU())
        elif row.kind == "pool":
            built.append(L.Pool2d(L.PoolSpec(row.pool, row.kernel, row.stride)))
        elif row.kind == "shuffle":
            built.append(L.PixelShuffle(row.kernel))
        elif row.kind == "tel":
            built.append(L.TextureEnergy())
        elif row.kind == "flatten":
            built.append(L.Flatten())
        elif row.kind == "fc":
            built.append(L.Linear(row.in_channels, row.out_channels, rng=rng))
        else:
            raise ConfigurationError(f"unknown layer kind {row.kind!r}")
    return built


class ConvBlock(L.Module):
    def __init__(self, conv, bn, relu, pool):
        self.conv, self.bn, self.relu, self.pool = conv, bn, relu, pool

    def forward(self, x):
        return self.pool(self.relu(self.bn(self.conv(x))))


class Encoder(L.Sequential):
    def __init__(self, spec: EncoderSpec, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        flat = _materialise(spec.layer_specs(), rng)
        super().__init__(*(ConvBlock(*flat[i:i + 4]) for i in range(0, len(flat), 4)))
        self.spec = spec

    def forward(self, x):
        r = self.spec.reduction
        if x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
            raise ConfigurationError(f"encoder input {x.shape} must be N x C x H x W "
                                     f"with H, W divisible by {r}")
        return super().forward(x)


class Decoder(L.Sequential):
    def __init__(self, spec: DecoderSpec = DecoderSpec()):
        super().__init__(*_materialise(spec.layer_specs(), None))
        self.spec = spec


class Autoencoder(L.Module):
    def __init__(self, encoder, decoder):
        self.encoder, self.decoder = encoder, decoder

    def forward(self, x):
        return self.decoder(self.encoder(x))


def build_autoencoder(pool_kind="eap", seed=0):
    """Stage-1 network: conv encoder and parameter-free pixel-shuffle decoder."""
    rng = np.random.default_rng(seed)
    enc = Encoder(EncoderSpec(pool=pool_kind), rng)
    return enc, Decoder(DecoderSpec(in_channels=enc.spec.out_channels))


class TelHead(L.Module):
    def __init__(self, rows, rng):
        conv, bn, relu, tel, fc = _materialise(rows, rng)
        self.conv, self.bn, self.relu, self.tel, self.fc = conv, bn, relu, tel, fc

    def signature(self, features):
        return self.tel(self.relu(self.bn(self.conv(features))))

    def forward(self, features):
        return self.fc(self.signature(features))


class FcHead(L.Module):
    def __init__(self, rows, rng):
        self.flatten, self.fc1, self.relu, self.fc2 = _materialise(rows, rng)
        self.in_features = rows[0].in_channels

    def forward(self, features):
        flat = self.flatten(features)
        if flat.shape[1] != self.in_features:
            raise ConfigurationError(f"FC head built for {self.in_features} features, "
                                     f"got {flat.shape[1]} (input resolution mismatch)")
        return self.fc2(self.relu(self.fc1(flat)))


class CombNet(L.Module):
    """Encoder followed by a classification head.

    After each forward pass of a TEL model, ``intermediates["tel"]`` holds the
    signature-layer activation.
    """

    def __init__(self, variant, num_classes, input_hw, seed=0):
        self.variant, self.num_classes, self.input_hw = variant, num_classes, tuple(input_hw)
        self.spec = combnet_spec(variant, num_classes, input_hw)
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(variant.encoder, rng)
        n_enc = len(variant.encoder.layer_specs())
        head_rows = self.spec.layers[n_enc:]
        self.head = TelHead(head_rows, rng) if variant.head == "tel" else FcHead(head_rows, rng)
        self.intermediates = {}

    def forward(self, x):
        features = self.encoder(x)
        if self.variant.head == "tel":
            sig = self.head.signature(features)
            self.intermediates = {"tel": sig}
            return self.head.fc(sig)
        return self.head(features)

    def signature(self, x):
        if self.variant.head != "tel":
            raise CapabilityError(f"{self.variant.name} has no TEL layer to extract signatures from")
        return self.head.signature(self.encoder(x))


def build_combnet(variant, num_classes, input_hw=DESK_RESOLUTION, encoder_state=None, seed=0):
    """Build a CombNet; ``pretrained`` variants need ``encoder_state``.

    ``encoder_state`` maps names like ``encoder.0.conv.weight`` (as saved by
    stage 1) to arrays.
    """
    if variant.init == "pretrained" and encoder_state is None:
        raise StateError(f"{variant.name} requests pretrained init but no encoder weights were given")
    model = CombNet(variant, num_classes, input_hw, seed=seed)
    if variant.init == "pretrained":
        load_state(model, encoder_state, prefix="encoder.")
    return model


def _targets(model):
    targets = {name: p for name, p in model.named_parameters()}
    targets.update(model.named_buffers())
    return targets


def load_state(model, state, prefix="", strict=False):
    """Copy arrays from ``state`` into ``model``.

    Only names starting with ``prefix`` are considered. Every shape is checked
    before anything is written, so a mismatch leaves the model untouched.
    """
    targets = _targets(model)
    chosen = {k: v for k, v in state.items() if k.startswith(prefix)}
    missing = [k for k in targets if k.startswith(prefix) and k not in chosen]
    if missing:
        raise StateError(f"state is missing tensors: {', '.join(missing[:5])}")
    unknown = [k for k in chosen if k not in targets]
    if unknown and strict:
        raise StateError(f"state has unexpected tensors: {', '.join(unknown[:5])}")
    for name, value in chosen.items():
        if name in targets:
            have = targets[name].shape
            if tuple(np.shape(value)) != tuple(have):
                raise ShapeMismatchError(name, have, np.shape(value))
    for name, value in chosen.items():
        if name not in targets:
            continue
        target = targets[name]
        arr = target if isinstance(target, np.ndarray) else target.data
        arr[...] = np.asarray(value, dtype=arr.dtype)
    return model


def encoder_state(model):
    """The ``encoder.*`` slice of a model's state dict (copies)."""
    state = model.state_dict()
    return {k: np.array(v) for k, v in state.items() if k.startswith("encoder.")}


def combnet_from_state(state, metadata):
    """Rebuild a trained CombNet from a stage-2 state dict and its metadata."""
    try:
        variant = CombNetVariant(pool=metadata["pool"], head=metadata["head"], init="random")
        num_classes, hw = int(metadata["num_classes"]), tuple(metadata["input_hw"])
    except KeyError as exc:
        raise StateError(f"checkpoint metadata lacks {exc.args[0]!r}; is it a stage-2 model?") from None
    model = CombNet(variant, num_classes, hw)
    load_state(model, state, strict=True)
    return model.eval()
