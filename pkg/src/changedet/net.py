"""Dual-encoder change segmentation model.

Two convolutional feature extractors (optionally weight-tied) run over the
T0 and T1 images; their feature maps are concatenated channel-wise and an
upsampling decoder restores full resolution, ending in a 1x1 convolution and
a sigmoid. The default "tiny" backbone is 4 stages of (3x3 conv s1, 3x3 conv
s2) with widths 16/32/64/128, i.e. a stride-16 tap at layer 8; an "external"
family builds the encoder from a parameter-manifest of pretrained conv
weights (see README for the manifest format).
"""

import copy
import io
import json
import math
import os
import zipfile
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .core import ConfigError, ImagePair, ProbabilityMask, ShapeError

CHECKPOINT_FORMAT_VERSION = 1
WEIGHT_MANIFEST_FORMAT_VERSION = 1

TINY_WIDTHS = (16, 16, 32, 32, 64, 64, 128, 128)
TINY_STRIDES = (1, 2, 1, 2, 1, 2, 1, 2)


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or unreadable checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version not supported by this code."""


@dataclass
class BackboneSpec:
    family: str = "tiny"
    tap_layer: int = 8
    widths: Tuple[int, ...] = TINY_WIDTHS
    strides: Tuple[int, ...] = TINY_STRIDES
    kernel_sizes: Optional[Tuple[int, ...]] = None  # default 3x3 everywhere
    manifest_path: Optional[str] = None  # external family only

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        if self.kernel_sizes is not None:
            self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.validate()

    @property
    def total_layers(self) -> int:
        return len(self.widths)

    def validate(self):
        if self.family not in ("tiny", "external"):
            raise ConfigError(f"backbone family must be 'tiny' or 'external', got {self.family!r}")
        if len(self.strides) != len(self.widths):
            raise ConfigError("widths and strides must have equal length")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigError("per-layer strides must be 1 or 2")
        if not 1 <= self.tap_layer <= self.total_layers:
            raise ConfigError(
                f"tap_layer must be in [1, {self.total_layers}], got {self.tap_layer}"
            )
        if self.kernel_sizes is not None:
            if len(self.kernel_sizes) != len(self.widths):
                raise ConfigError("kernel_sizes must match widths in length")
            if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
                raise ConfigError("kernel sizes must be odd")
        return self

    def stride_at(self, layer: Optional[int] = None) -> int:
        """Cumulative stride after `layer` layers (default: at the tap)."""
        layer = self.tap_layer if layer is None else layer
        out = 1
        for s in self.strides[:layer]:
            out *= s
        return out

    def tap_channels(self) -> int:
        return self.widths[self.tap_layer - 1]


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """H' x W' x C feature maps plus the input-pixels-per-cell stride."""

    data: np.ndarray
    stride: int

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3:
            raise ShapeError(f"features must be H'xW'xC, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ConfigError("feature tensor contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _he_init(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _make_encoder_layers(spec: BackboneSpec) -> nn.ModuleList:
    layers = []
    in_c = 3
    for i in range(spec.tap_layer):
        k = 3 if spec.kernel_sizes is None else spec.kernel_sizes[i]
        conv = nn.Conv2d(in_c, spec.widths[i], k, stride=spec.strides[i], padding=k // 2)
        layers.append(nn.Sequential(conv, nn.ReLU(inplace=True)))
        in_c = spec.widths[i]
    return nn.ModuleList(layers)


def default_decoder_widths(stride: int) -> Tuple[int, ...]:
    n_up = int(round(math.log2(stride)))
    return tuple(max(8, 64 >> i) for i in range(n_up))


def _make_decoder(in_channels: int, stride: int, widths: Tuple[int, ...]) -> nn.Sequential:
    if stride < 1 or (stride & (stride - 1)) != 0:
        raise ConfigError(f"tap stride must be a power of 2, got {stride}")
    n_up = int(round(math.log2(stride)))
    if len(widths) != n_up:
        raise ConfigError(
            f"decoder widths {widths} must have log2(stride) = {n_up} entries"
        )
    layers: List[nn.Module] = []
    c = in_channels
    for w in widths:
        layers += [
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c, w, 3, padding=1),
            nn.ReLU(inplace=True),
        ]
        c = w
    layers.append(nn.Conv2d(c, 1, 1))
    return nn.Sequential(*layers)


class ChangeModel(nn.Module):
    """Two encoders, channel concatenation, upsampling decoder with sigmoid head."""

    def __init__(
        self,
        spec: BackboneSpec,
        weight_tying: str = "untied",
        decoder_widths: Optional[Tuple[int, ...]] = None,
        init_seed: int = 0,
        external_params: Optional[list] = None,
    ):
        super().__init__()
        if weight_tying not in ("tied", "untied"):
            raise ConfigError("weight_tying must be 'tied' or 'untied'")
        spec.validate()
        self.spec = spec
        self.weight_tying = weight_tying
        self.trainable_tail_k = spec.tap_layer
        stride = spec.stride_at()
        if decoder_widths is None:
            decoder_widths = default_decoder_widths(stride)
        self.decoder_widths = tuple(decoder_widths)

        torch.manual_seed(init_seed)
        self.init_seed = init_seed
        self.encoder_a = _make_encoder_layers(spec)
        _he_init(self.encoder_a)
        if external_params is not None:
            self._load_external(self.encoder_a, external_params)
        if weight_tying == "tied":
            self.encoder_b = self.encoder_a
        else:
            # untied but initialized identically
            self.encoder_b = copy.deepcopy(self.encoder_a)
        self.decoder = _make_decoder(2 * spec.tap_channels(), stride, self.decoder_widths)
        _he_init(self.decoder)

    @staticmethod
    def _load_external(encoder: nn.ModuleList, params: list):
        for layer, (weight, bias) in zip(encoder, params):
            conv = layer[0]
            if tuple(conv.weight.shape) != weight.shape:
                raise ConfigError(
                    f"external weight shape {weight.shape} does not match "
                    f"layer shape {tuple(conv.weight.shape)}"
                )
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(weight))
                conv.bias.copy_(torch.from_numpy(bias))

    @property
    def tap_stride(self) -> int:
        return self.spec.stride_at()

    def encoder(self, branch: str) -> nn.ModuleList:
        if branch not in ("a", "b"):
            raise ConfigError(f"branch must be 'a' or 'b', got {branch!r}")
        return self.encoder_a if branch == "a" else self.encoder_b

    def encode(self, x: torch.Tensor, branch: str) -> torch.Tensor:
        for layer in self.encoder(branch):
            x = layer(x)
        return x

    def logits(self, t0: torch.Tensor, t1: torch.Tensor) -> torch.Tensor:
        """(B,3,H,W) x2 -> (B,1,H,W) pre-sigmoid logits."""
        fa = self.encode(t0, "a")
        fb = self.encode(t1, "b")
        return self.decoder(torch.cat([fa, fb], dim=1))

    def predict(self, pair: ImagePair) -> ProbabilityMask:
        return forward(self, pair)


def _check_divisible(shape, stride: int):
    h, w = shape[:2]
    if h % stride or w % stride:
        raise ShapeError(
            f"image dims {h}x{w} not divisible by tap stride {stride}"
        )


def _to_torch(img: np.ndarray) -> torch.Tensor:
    # HWC [0,1] float -> 1CHW float32
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(img, 2, 0))[None]).float()


def extract_features(model: ChangeModel, image: np.ndarray, branch: str) -> FeatureTensor:
    """Deterministic forward through one encoder, truncated at the tap layer."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be HxWx3, got {img.shape}")
    stride = model.tap_stride
    _check_divisible(img.shape, stride)
    with torch.no_grad():
        out = model.encode(_to_torch(img), branch)
    data = np.moveaxis(out[0].numpy(), 0, 2)
    return FeatureTensor(data=data, stride=stride)


def fuse(fa: FeatureTensor, fb: FeatureTensor) -> FeatureTensor:
    """Channel-axis concatenation; fa occupies the first channels."""
    if fa.data.shape[:2] != fb.data.shape[:2] or fa.stride != fb.stride:
        raise ShapeError(
            f"cannot fuse features {fa.data.shape}@{fa.stride} with "
            f"{fb.data.shape}@{fb.stride}"
        )
    return FeatureTensor(
        data=np.concatenate([fa.data, fb.data], axis=2), stride=fa.stride
    )


def decode(model: ChangeModel, fused: FeatureTensor) -> ProbabilityMask:
    """Upsampling decoder + sigmoid; output spatial dims = stride * feature dims."""
    stride = fused.stride
    if stride < 1 or (stride & (stride - 1)) != 0:
        raise ConfigError(f"fused stride must be a power of 2, got {stride}")
    expected_c = 2 * model.spec.tap_channels()
    if fused.channels != expected_c:
        raise ShapeError(
            f"fused features have {fused.channels} channels, decoder expects {expected_c}"
        )
    if stride != model.tap_stride:
        raise ShapeError(
            f"fused stride {stride} != model tap stride {model.tap_stride}"
        )
    x = torch.from_numpy(np.moveaxis(fused.data, 2, 0)[None]).float()
    with torch.no_grad():
        z = model.decoder(x)
        p = torch.sigmoid(z)
    return ProbabilityMask(p[0, 0].numpy().astype(np.float64))


def forward(model: ChangeModel, pair: ImagePair) -> ProbabilityMask:
    """Full pass: decode(fuse(F_a(t0), F_b(t1))) as a probability mask."""
    _check_divisible(pair.shape, model.tap_stride)
    with torch.no_grad():
        z = model.logits(_to_torch(np.array(pair.t0)), _to_torch(np.array(pair.t1)))
        p = torch.sigmoid(z)
    return ProbabilityMask(p[0, 0].numpy().astype(np.float64))


def set_trainable_tail(model: ChangeModel, k: int) -> ChangeModel:
    """Mark the last k encoder layers before the tap trainable, freeze the rest.

    The decoder is always trainable. Applies to both encoders (tied encoders
    share parameters anyway).
    """
    tap = model.spec.tap_layer
    if not 0 <= k <= tap:
        raise ConfigError(f"trainable tail k must be in [0, {tap}], got {k}")
    for encoder in {id(model.encoder_a): model.encoder_a, id(model.encoder_b): model.encoder_b}.values():
        for i, layer in enumerate(encoder):
            requires = i >= tap - k
            for p in layer.parameters():
                p.requires_grad_(requires)
    for p in model.decoder.parameters():
        p.requires_grad_(True)
    model.trainable_tail_k = k
    return model


def trainable_parameters(model: ChangeModel):
    seen = set()
    out = []
    for p in model.parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        if p.requires_grad:
            out.append(p)
    return out


# --- checkpoint io -------------------------------------------------------


def _param_entries(model: ChangeModel):
    entries = [("encoder_a", model.encoder_a), ("decoder", model.decoder)]
    if model.weight_tying == "untied":
        entries.insert(1, ("encoder_b", model.encoder_b))
    for prefix, module in entries:
        for name, p in module.state_dict().items():
            yield f"{prefix}.{name}", p.detach().numpy()


def save_checkpoint(model: ChangeModel, path: str) -> str:
    """Single-archive checkpoint: header.json + raw .npy parameter payloads."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone": {
            "family": model.spec.family,
            "tap_layer": model.spec.tap_layer,
            "widths": list(model.spec.widths),
            "strides": list(model.spec.strides),
            "kernel_sizes": list(model.spec.kernel_sizes)
            if model.spec.kernel_sizes
            else None,
        },
        "weight_tying": model.weight_tying,
        "trainable_tail_k": model.trainable_tail_k,
        "decoder_widths": list(model.decoder_widths),
        "params": [name for name, _ in _param_entries(model)],
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def entry(name):  # fixed timestamp so identical runs give identical bytes
        return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))

    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(entry("header.json"), json.dumps(header, indent=1))
        for name, arr in _param_entries(model):
            buf = io.BytesIO()
            np.save(buf, arr)
            zf.writestr(entry(f"params/{name}.npy"), buf.getvalue())
    return path


def load_checkpoint(path: str) -> ChangeModel:
    """Rebuild a model whose forward output is bit-identical to the saved one."""
    if not os.path.exists(path):
        raise CheckpointError(f"missing checkpoint: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            version = header.get("format_version")
            if version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointVersionError(
                    f"checkpoint format_version {version!r} unsupported "
                    f"(expected {CHECKPOINT_FORMAT_VERSION})"
                )
            params = {}
            for name in header["params"]:
                params[name] = np.load(io.BytesIO(zf.read(f"params/{name}.npy")))
    except CheckpointVersionError:
        raise
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError, EOFError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e

    b = header["backbone"]
    spec = BackboneSpec(
        family=b["family"],
        tap_layer=b["tap_layer"],
        widths=tuple(b["widths"]),
        strides=tuple(b["strides"]),
        kernel_sizes=tuple(b["kernel_sizes"]) if b.get("kernel_sizes") else None,
    )
    model = ChangeModel(
        spec,
        weight_tying=header["weight_tying"],
        decoder_widths=tuple(header["decoder_widths"]),
    )
    modules = {"encoder_a": model.encoder_a, "decoder": model.decoder}
    if header["weight_tying"] == "untied":
        modules["encoder_b"] = model.encoder_b
    for prefix, module in modules.items():
        state = {}
        for name, arr in params.items():
            if name.startswith(prefix + "."):
                state[name[len(prefix) + 1 :]] = torch.from_numpy(arr)
        module.load_state_dict(state)
    set_trainable_tail(model, header["trainable_tail_k"])
    return model


# --- external pretrained-weight import -----------------------------------


def load_weight_manifest(manifest_path: str):
    """Read a pretrained-weight manifest: JSON mapping conv layers to .npy files.

    Schema: {"format_version": 1, "layers": [{"name": str, "stride": 1|2,
    "weight": "file.npy", "bias": "file.npy"}, ...]}; weight arrays are
    (out_c, in_c, k, k), biases (out_c,). Returns (BackboneSpec, params).
    """
    if not os.path.exists(manifest_path):
        raise ConfigError(f"missing weight manifest: {manifest_path}")
    with open(manifest_path) as f:
        doc = json.load(f)
    if doc.get("format_version") != WEIGHT_MANIFEST_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported weight manifest format_version {doc.get('format_version')!r}"
        )
    root = os.path.dirname(os.path.abspath(manifest_path))
    widths, strides, kernels, params = [], [], [], []
    in_c = 3
    for i, layer in enumerate(doc["layers"]):
        weight = np.load(os.path.join(root, layer["weight"])).astype(np.float32)
        bias = np.load(os.path.join(root, layer["bias"])).astype(np.float32)
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ConfigError(f"layer {i}: weight must be (out,in,k,k), got {weight.shape}")
        if weight.shape[1] != in_c:
            raise ConfigError(
                f"layer {i}: in_channels {weight.shape[1]} != expected {in_c}"
            )
        if bias.shape != (weight.shape[0],):
            raise ConfigError(f"layer {i}: bias shape {bias.shape} mismatched")
        widths.append(weight.shape[0])
        strides.append(int(layer.get("stride", 1)))
        kernels.append(weight.shape[2])
        params.append((weight, bias))
        in_c = weight.shape[0]
    spec = BackboneSpec(
        family="external",
        tap_layer=len(widths),
        widths=tuple(widths),
        strides=tuple(strides),
        kernel_sizes=tuple(kernels),
        manifest_path=manifest_path,
    )
    return spec, params


def build_external_model(
    manifest_path: str,
    tap_layer: Optional[int] = None,
    weight_tying: str = "untied",
    decoder_widths: Optional[Tuple[int, ...]] = None,
    init_seed: int = 0,
) -> ChangeModel:
    """Encoder from imported pretrained weights; decoder freshly initialized."""
    spec, params = load_weight_manifest(manifest_path)
    if tap_layer is not None:
        if not 1 <= tap_layer <= len(params):
            raise ConfigError(
                f"tap_layer must be in [1, {len(params)}], got {tap_layer}"
            )
        spec = BackboneSpec(
            family="external",
            tap_layer=tap_layer,
            widths=spec.widths,
            strides=spec.strides,
            kernel_sizes=spec.kernel_sizes,
            manifest_path=manifest_path,
        )
    return ChangeModel(
        spec,
        weight_tying=weight_tying,
        decoder_widths=decoder_widths,
        init_seed=init_seed,
        external_params=params[: spec.tap_layer],
    )
