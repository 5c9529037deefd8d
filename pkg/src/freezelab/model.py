"""Layers, the backbone/neck/head detector, and its freeze-aware forward.

The detector is deliberately tiny: a conv stack as the backbone, an
optional flatten/dense neck, and a dense head that emits one prediction
vector per cell of an S x S grid (objectness logit, C class logits, and
4 box offsets). The freeze signal gates the backbone as a single unit:
with freeze=1 the backbone runs without tape recording and its output is
detached, so the forward values are bit-identical to the unfrozen pass
while no gradient can reach any backbone parameter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluation import BBox, Detection, GroundTruth
from .flops import LayerFlopsSpec, layer_forward_flops
from .rng import STREAM_PARAM_INIT, generator

__all__ = [
    "Layer",
    "Detector",
    "PredictionGrid",
    "ShapeChainError",
    "LAYER_KINDS",
    "default_desk_arch",
    "build_detector",
    "detector_forward",
    "detection_loss",
    "encode_targets",
    "decode_predictions",
    "parameter_groups",
    "flops_specs",
    "save_checkpoint",
    "load_checkpoint",
    "restore_checkpoint",
]

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten")


class ShapeChainError(ValueError):
    """Adjacent layers in an architecture disagree about shapes."""


class Layer:
    """One architectural unit: kind, hyperparameters, and named parameters.

    Parameter shapes follow the engine's conventions: dense weight is
    [in_features, out_features], conv weight is [out_ch, in_ch, k, k].
    `params` is populated by build_detector; parameterless kinds keep it
    empty.
    """

    __slots__ = ("kind", "layer_id", "in_features", "out_features",
                 "in_channels", "out_channels", "kernel", "stride",
                 "params", "input_shape")

    def __init__(self, kind: str, layer_id: int, *, in_features=None, out_features=None,
                 in_channels=None, out_channels=None, kernel=None, stride=None):
        if kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
        self.kind = kind
        self.layer_id = int(layer_id)
        self.in_features = in_features
        self.out_features = out_features
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.params: dict[str, Tensor] = {}
        self.input_shape: Optional[tuple[int, ...]] = None

        if kind == "dense":
            if not (isinstance(in_features, int) and in_features >= 1
                    and isinstance(out_features, int) and out_features >= 1):
                raise ValueError(f"dense layer {layer_id} needs positive in_features/out_features")
        elif kind == "conv2d":
            if not (isinstance(in_channels, int) and in_channels >= 1
                    and isinstance(out_channels, int) and out_channels >= 1):
                raise ValueError(f"conv2d layer {layer_id} needs positive channel counts")
            if not (isinstance(kernel, int) and kernel >= 1):
                raise ValueError(f"conv2d layer {layer_id} needs a positive kernel")
            self.stride = 1 if stride is None else stride
            if not (isinstance(self.stride, int) and self.stride >= 1):
                raise ValueError(f"conv2d layer {layer_id} needs a positive stride")
        elif kind == "maxpool2d":
            if not (isinstance(kernel, int) and kernel >= 1):
                raise ValueError(f"maxpool2d layer {layer_id} needs a positive kernel")
            self.stride = kernel if stride is None else stride
            if not (isinstance(self.stride, int) and self.stride >= 1):
                raise ValueError(f"maxpool2d layer {layer_id} needs a positive stride")

    def describe(self) -> str:
        if self.kind == "dense":
            return f"dense({self.in_features}->{self.out_features})"
        if self.kind == "conv2d":
            return f"conv2d({self.in_channels}->{self.out_channels},k{self.kernel},s{self.stride})"
        if self.kind == "maxpool2d":
            return f"maxpool2d(k{self.kernel},s{self.stride})"
        return self.kind

    def output_shape(self, input_shape: Sequence[int]) -> tuple[int, ...]:
        """Per-sample output shape, or raise if this layer cannot consume
        `input_shape`."""
        shape = tuple(int(s) for s in input_shape)
        if self.kind == "dense":
            if len(shape) != 1 or shape[0] != self.in_features:
                raise ShapeChainError(
                    f"layer {self.layer_id} ({self.describe()}) expects a flat "
                    f"input of size {self.in_features}, got shape {shape}"
                )
            return (self.out_features,)
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[0] != self.in_channels:
                raise ShapeChainError(
                    f"layer {self.layer_id} ({self.describe()}) expects "
                    f"[{self.in_channels}, H, W], got shape {shape}"
                )
            _, h, w = shape
            if h < self.kernel or w < self.kernel:
                raise ShapeChainError(
                    f"layer {self.layer_id} ({self.describe()}) kernel does not fit input {shape}"
                )
            ho = (h - self.kernel) // self.stride + 1
            wo = (w - self.kernel) // self.stride + 1
            return (self.out_channels, ho, wo)
        if self.kind == "maxpool2d":
            if len(shape) != 3:
                raise ShapeChainError(
                    f"layer {self.layer_id} ({self.describe()}) expects [C, H, W], got shape {shape}"
                )
            c, h, w = shape
            if h < self.kernel or w < self.kernel:
                raise ShapeChainError(
                    f"layer {self.layer_id} ({self.describe()}) window does not fit input {shape}"
                )
            ho = (h - self.kernel) // self.stride + 1
            wo = (w - self.kernel) // self.stride + 1
            return (c, ho, wo)
        if self.kind == "flatten":
            n = 1
            for s in shape:
                n *= s
            return (n,)
        return shape  # relu


@dataclass
class Detector:
    backbone: tuple
    neck: tuple  # may be empty
    head: tuple
    group_of: dict  # layer_id -> group name
    input_shape: tuple
    grid_size: int
    num_classes: int

    def layers(self) -> tuple:
        return self.backbone + self.neck + self.head

    def parameters(self) -> list[tuple[str, Tensor]]:
        """All (param_id, tensor) pairs in a fixed order; param_id is
        '<layer_id>.<name>'."""
        out = []
        for layer in self.layers():
            for name in ("weight", "bias"):
                if name in layer.params:
                    out.append((f"{layer.layer_id}.{name}", layer.params[name]))
        return out

    def grad_key_table(self) -> dict[int, str]:
        """Map tensor uid -> param_id, for translating backward() output."""
        return {tensor.uid: pid for pid, tensor in self.parameters()}


@dataclass(frozen=True)
class PredictionGrid:
    """Dense per-cell predictions: [batch, S, S, 1 + C + 4].

    Channel 0 is the objectness logit, channels 1..C are class logits,
    and the last four are box offsets (center dx, dy within the cell,
    then log-width and log-height in cell units).
    """

    tensor: Tensor
    grid_size: int
    num_classes: int

    def __post_init__(self):
        s, c = self.grid_size, self.num_classes
        expect = (self.tensor.shape[0], s, s, 1 + c + 4)
        if self.tensor.shape != expect:
            raise ValueError(f"prediction tensor shape {self.tensor.shape}, expected {expect}")

    @property
    def objectness_logits(self) -> np.ndarray:
        return self.tensor.data[..., 0]

    @property
    def class_logits(self) -> np.ndarray:
        return self.tensor.data[..., 1 : 1 + self.num_classes]

    @property
    def box_offsets(self) -> np.ndarray:
        return self.tensor.data[..., 1 + self.num_classes :]


def default_desk_arch() -> dict:
    """The stock desk-scale architecture: 32x32x3 in, 4x4 grid, 3 classes."""
    return {
        "input_shape": [3, 32, 32],
        "grid_size": 4,
        "num_classes": 3,
        "backbone": [
            {"kind": "conv2d", "in_channels": 3, "out_channels": 8, "kernel": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool2d", "kernel": 2, "stride": 2},
            {"kind": "conv2d", "in_channels": 8, "out_channels": 16, "kernel": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool2d", "kernel": 2, "stride": 2},
        ],
        "neck": [
            {"kind": "flatten"},
        ],
        "head": [
            {"kind": "dense", "in_features": 576, "out_features": 64},
            {"kind": "relu"},
            {"kind": "dense", "in_features": 64, "out_features": 128},
        ],
    }


def _init_layer_params(layer: Layer, init_seed: int) -> None:
    # Weights are uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out));
    # biases start at zero. Each layer draws from its own stream keyed by
    # layer_id, so initialization does not depend on build order.
    if layer.kind == "dense":
        fan_in, fan_out = layer.in_features, layer.out_features
        a = np.sqrt(6.0 / (fan_in + fan_out))
        rng = generator(init_seed, STREAM_PARAM_INIT, layer.layer_id)
        w = rng.uniform(-a, a, size=(fan_in, fan_out))
        layer.params["weight"] = Tensor(w, requires_grad=True)
        layer.params["bias"] = Tensor(np.zeros(fan_out), requires_grad=True)
    elif layer.kind == "conv2d":
        k = layer.kernel
        fan_in = layer.in_channels * k * k
        fan_out = layer.out_channels * k * k
        a = np.sqrt(6.0 / (fan_in + fan_out))
        rng = generator(init_seed, STREAM_PARAM_INIT, layer.layer_id)
        w = rng.uniform(-a, a, size=(layer.out_channels, layer.in_channels, k, k))
        layer.params["weight"] = Tensor(w, requires_grad=True)
        layer.params["bias"] = Tensor(np.zeros(layer.out_channels), requires_grad=True)


def build_detector(arch_config: dict, init_seed: int) -> Detector:
    """Instantiate and initialize a detector from an architecture dict.

    The dict carries input_shape, grid_size, num_classes, and one list of
    layer specs per group ('neck' may be absent or empty). Shapes are
    chained through every layer up front; a mismatch raises
    ShapeChainError naming both offending layers. Two calls with the same
    config and seed produce parameter-wise bit-identical detectors.
    """
    required = {"input_shape", "grid_size", "num_classes", "backbone", "head"}
    missing = required - set(arch_config)
    if missing:
        raise ValueError(f"arch config is missing keys: {sorted(missing)}")

    input_shape = tuple(int(s) for s in arch_config["input_shape"])
    grid_size = int(arch_config["grid_size"])
    num_classes = int(arch_config["num_classes"])
    if grid_size < 1 or num_classes < 1:
        raise ValueError("grid_size and num_classes must be >= 1")
    if len(input_shape) != 3:
        raise ValueError(f"input_shape must be [channels, H, W], got {input_shape}")

    groups = {}
    group_of = {}
    next_id = 0
    for group in ("backbone", "neck", "head"):
        specs = arch_config.get(group) or []
        layers = []
        for spec in specs:
            spec = dict(spec)
            kind = spec.pop("kind", None)
            layer = Layer(kind, next_id, **spec)
            group_of[next_id] = group
            layers.append(layer)
            next_id += 1
        groups[group] = tuple(layers)
    if not groups["backbone"] or not groups["head"]:
        raise ValueError("arch config needs at least one backbone layer and one head layer")

    # Chain shapes through the whole stack before allocating anything.
    shape = input_shape
    prev: Optional[Layer] = None
    for layer in groups["backbone"] + groups["neck"] + groups["head"]:
        layer.input_shape = shape
        try:
            shape = layer.output_shape(shape)
        except ShapeChainError as err:
            if prev is not None:
                raise ShapeChainError(
                    f"{err} (previous layer {prev.layer_id} ({prev.describe()}) emits {shape})"
                ) from None
            raise
        prev = layer

    head_out = 1 + num_classes + 4
    expect = (grid_size * grid_size * head_out,)
    if shape != expect:
        raise ShapeChainError(
            f"head output shape {shape} cannot form a {grid_size}x{grid_size} grid "
            f"of {head_out}-channel predictions (needs {expect})"
        )

    for layer in groups["backbone"] + groups["neck"] + groups["head"]:
        _init_layer_params(layer, init_seed)

    return Detector(
        backbone=groups["backbone"],
        neck=groups["neck"],
        head=groups["head"],
        group_of=group_of,
        input_shape=input_shape,
        grid_size=grid_size,
        num_classes=num_classes,
    )


def _apply_layer(layer: Layer, x: Tensor) -> Tensor:
    if layer.kind == "dense":
        return ad.add(ad.matmul(x, layer.params["weight"]), layer.params["bias"])
    if layer.kind == "conv2d":
        return ad.conv2d(x, layer.params["weight"], bias=layer.params["bias"], stride=layer.stride)
    if layer.kind == "relu":
        return ad.relu(x)
    if layer.kind == "maxpool2d":
        return ad.maxpool2d(x, kernel=layer.kernel, stride=layer.stride)
    if layer.kind == "flatten":
        return ad.flatten(x)
    raise AssertionError(f"unhandled layer kind {layer.kind}")


def detector_forward(d: Detector, batch: Tensor, freeze: int) -> PredictionGrid:
    """Full forward pass under a freeze signal.

    freeze=1 runs the backbone without tape recording and detaches its
    output, so downstream gradient flow stops at the backbone boundary;
    freeze=0 records normally. The returned values are identical either
    way.
    """
    if freeze not in (0, 1):
        raise ValueError(f"freeze signal must be 0 or 1, got {freeze!r}")
    if batch.data.ndim != len(d.input_shape) + 1 or batch.shape[1:] != d.input_shape:
        raise ValueError(f"batch shape {batch.shape} does not match input shape {d.input_shape}")

    if freeze:
        with ad.pause_recording():
            out = batch
            for layer in d.backbone:
                out = _apply_layer(layer, out)
        out = ad.detach(out)
    else:
        out = batch
        for layer in d.backbone:
            out = _apply_layer(layer, out)

    for layer in d.neck:
        out = _apply_layer(layer, out)
    for layer in d.head:
        out = _apply_layer(layer, out)

    s, c = d.grid_size, d.num_classes
    grid = ad.reshape(out, (batch.shape[0], s, s, 1 + c + 4))
    return PredictionGrid(tensor=grid, grid_size=s, num_classes=c)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def detection_loss(pred: PredictionGrid, targets: np.ndarray) -> Tensor:
    """Scalar training loss for one batch.

    Three mean-reduced terms: sigmoid binary cross-entropy on the
    objectness channel over every cell, softmax cross-entropy on the class
    channels over positive cells, and squared error on the box offsets
    over positive cells. With no positive cell the last two terms are 0.
    The gradient is supplied analytically as one fused tape node.
    """
    targets = np.asarray(targets, dtype=np.float64)
    data = pred.tensor.data
    if targets.shape != data.shape:
        raise ValueError(f"targets shape {targets.shape} does not match predictions {data.shape}")
    c = pred.num_classes

    obj_logit = data[..., 0]
    obj_target = targets[..., 0]
    n_cells = obj_logit.size
    # log(1 + e^z) - z*t, computed stably
    bce = float(np.mean(np.logaddexp(0.0, obj_logit) - obj_logit * obj_target))

    pos = obj_target == 1.0
    n_pos = int(pos.sum())
    if n_pos > 0:
        logits = data[..., 1 : 1 + c][pos]           # [P, C]
        onehot = targets[..., 1 : 1 + c][pos]
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        ce = float(np.mean(lse - (logits * onehot).sum(axis=1)))
        box = data[..., 1 + c :][pos]                # [P, 4]
        box_t = targets[..., 1 + c :][pos]
        se = float(np.mean((box - box_t) ** 2))
        softmax = np.exp(logits - m)
        softmax /= softmax.sum(axis=1, keepdims=True)
    else:
        ce = 0.0
        se = 0.0

    def bwd(g):
        gs = float(g)
        grad = np.zeros_like(data)
        grad[..., 0] = gs * (_sigmoid(obj_logit) - obj_target) / n_cells
        if n_pos > 0:
            grad_cls = np.zeros_like(data[..., 1 : 1 + c])
            grad_cls[pos] = gs * (softmax - onehot) / n_pos
            grad[..., 1 : 1 + c] = grad_cls
            grad_box = np.zeros_like(data[..., 1 + c :])
            grad_box[pos] = gs * 2.0 * (box - box_t) / (4.0 * n_pos)
            grad[..., 1 + c :] = grad_box
        return (grad,)

    return ad.record_external("detection_loss", np.asarray(bce + ce + se), (pred.tensor,), bwd)


def encode_targets(
    ground_truths_per_image: Sequence[Sequence[GroundTruth]],
    grid_size: int,
    num_classes: int,
    image_size: int,
) -> np.ndarray:
    """Rasterize boxes into the [B, S, S, 1+C+4] target grid.

    A box's positive cell is the one containing its center; if two boxes
    share a cell the first one in sequence order wins. Offsets are the
    center position within the cell (in [0, 1]) and log box size in cell
    units.
    """
    b = len(ground_truths_per_image)
    s, c = grid_size, num_classes
    cell = image_size / s
    grid = np.zeros((b, s, s, 1 + c + 4))
    for bi, gts in enumerate(ground_truths_per_image):
        for gt in gts:
            if not (0 <= gt.class_id < c):
                raise ValueError(f"class_id {gt.class_id} out of range for {c} classes")
            box = gt.box
            if box.xmax <= box.xmin or box.ymax <= box.ymin:
                raise ValueError(f"cannot encode a zero-area box {box!r}")
            cx, cy = (box.xmin + box.xmax) / 2.0, (box.ymin + box.ymax) / 2.0
            sx = min(int(cx / cell), s - 1)
            sy = min(int(cy / cell), s - 1)
            if grid[bi, sy, sx, 0] == 1.0:
                continue
            grid[bi, sy, sx, 0] = 1.0
            grid[bi, sy, sx, 1 + gt.class_id] = 1.0
            grid[bi, sy, sx, 1 + c + 0] = cx / cell - sx
            grid[bi, sy, sx, 1 + c + 1] = cy / cell - sy
            grid[bi, sy, sx, 1 + c + 2] = np.log((box.xmax - box.xmin) / cell)
            grid[bi, sy, sx, 1 + c + 3] = np.log((box.ymax - box.ymin) / cell)
    return grid


def decode_predictions(
    pred: PredictionGrid,
    image_ids: Sequence[int],
    image_size: int,
) -> list[Detection]:
    """Per-cell decoding: a cell emits one detection when its objectness
    sigmoid exceeds 0.5; score = objectness times the best class
    probability. Boxes are clipped to the image; cells whose box clips to
    nothing are dropped."""
    data = pred.tensor.data
    if data.shape[0] != len(image_ids):
        raise ValueError(f"got {len(image_ids)} image ids for a batch of {data.shape[0]}")
    s, c = pred.grid_size, pred.num_classes
    cell = image_size / s

    p_obj = _sigmoid(pred.objectness_logits)
    logits = pred.class_logits
    m = logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits - m)
    probs /= probs.sum(axis=-1, keepdims=True)
    offsets = pred.box_offsets

    detections = []
    for bi, image_id in enumerate(image_ids):
        for sy in range(s):
            for sx in range(s):
                if p_obj[bi, sy, sx] <= 0.5:
                    continue
                cls = int(np.argmax(probs[bi, sy, sx]))
                score = float(p_obj[bi, sy, sx] * probs[bi, sy, sx, cls])
                dx, dy, tw, th = offsets[bi, sy, sx]
                cx, cy = (sx + dx) * cell, (sy + dy) * cell
                w = float(np.exp(np.clip(tw, -12.0, 12.0))) * cell
                h = float(np.exp(np.clip(th, -12.0, 12.0))) * cell
                x0, x1 = max(0.0, cx - w / 2), min(float(image_size), cx + w / 2)
                y0, y1 = max(0.0, cy - h / 2), min(float(image_size), cy + h / 2)
                if x1 <= x0 or y1 <= y0:
                    continue
                detections.append(
                    Detection(image_id=int(image_id), class_id=cls, score=score,
                              box=BBox(x0, y0, x1, y1))
                )
    return detections


def parameter_groups(d: Detector) -> dict[str, tuple[str, ...]]:
    """Partition of parameter ids by group, in parameters() order."""
    out: dict[str, list[str]] = {"backbone": [], "neck": [], "head": []}
    group_by_layer = d.group_of
    for pid, _ in d.parameters():
        layer_id = int(pid.split(".", 1)[0])
        out[group_by_layer[layer_id]].append(pid)
    return {g: tuple(ids) for g, ids in out.items()}


def flops_specs(d: Detector) -> list[LayerFlopsSpec]:
    """Per-layer forward cost (one sample), tagged with each layer's group."""
    return [
        LayerFlopsSpec(
            layer_id=layer.layer_id,
            group=d.group_of[layer.layer_id],
            forward_flops_per_sample=layer_forward_flops(layer, layer.input_shape),
        )
        for layer in d.layers()
    ]


# --------------------------------------------------------------------------
# checkpointing
#
# Binary layout, little-endian, version 1:
#   magic   4 bytes  b"FZCK"
#   version u16      1
#   count   u32      number of parameter entries
# then per entry:
#   layer_id u32, name_len u16, name utf-8, ndim u8, dims u32 * ndim,
#   values  f64 * prod(dims), row-major
# Round-trips bit-exactly: values are dumped as raw float64.

_CKPT_MAGIC = b"FZCK"
_CKPT_VERSION = 1


def save_checkpoint(d: Detector, path) -> None:
    entries = []
    for pid, tensor in d.parameters():
        layer_id, name = pid.split(".", 1)
        entries.append((int(layer_id), name, tensor.data))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HI", _CKPT_VERSION, len(entries)))
        for layer_id, name, arr in entries:
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<IH", layer_id, len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> list[tuple[int, str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 10
    entries = []
    for _ in range(count):
        layer_id, name_len = struct.unpack_from("<IH", blob, offset)
        offset += 6
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        n = 1
        for s in shape:
            n *= s
        values = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        entries.append((layer_id, name, values.astype(np.float64)))
    if offset != len(blob):
        raise ValueError(f"{path} has {len(blob) - offset} trailing bytes")
    return entries


def restore_checkpoint(d: Detector, path) -> None:
    """Copy checkpoint values into the detector's parameters.

    The checkpoint must cover exactly the detector's parameter set with
    matching shapes; anything else is an error.
    """
    entries = load_checkpoint(path)
    by_id = {f"{layer_id}.{name}": values for layer_id, name, values in entries}
    params = dict(d.parameters())
    if set(by_id) != set(params):
        missing = sorted(set(params) - set(by_id))
        extra = sorted(set(by_id) - set(params))
        raise ValueError(f"checkpoint does not match detector (missing={missing}, extra={extra})")
    for pid, tensor in params.items():
        values = by_id[pid]
        if values.shape != tensor.shape:
            raise ValueError(f"checkpoint shape {values.shape} for {pid!r}, expected {tensor.shape}")
        tensor.data[...] = values
