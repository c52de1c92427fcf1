"""Tiny encoder-decoder segmentation models on the autodiff tensor core.

Two architectures share one parameter scheme and differ only in how the
decoder merges skip connections: "unet" concatenates skip channels,
"linknet" adds them. Blocks are two 3x3 convolutions with per-channel
affine scaling (no batch statistics anywhere, so evaluation is exactly
deterministic), a ReLU after each, and a residual shortcut with a 1x1
projection whenever the channel count changes. Downsampling is 2x2 max
pooling; upsampling is a 2x2 stride-2 transposed convolution.

The decoder's final block output feeds a 1x1 classifier conv; that block
output is the model's named representation layer, used by the
representation-inversion code in ``robustify``.
"""

from __future__ import annotations

import hashlib
import math
import os
from contextlib import contextmanager

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    conv2d,
    get_default_dtype,
    maxpool2d,
    mul,
    relu,
    transposed_conv2d,
)

ARCHITECTURES = ("unet", "linknet")

CHECKPOINT_MANIFEST = "manifest.txt"
CHECKPOINT_WEIGHTS = "weights.bin"
_CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint directory is missing, corrupt, or incompatible."""


class SegModel:
    """A segmentation network: named parameter tensors plus the forward wiring.

    Parameters live in an insertion-ordered dict, so iteration order (and
    therefore initialization, checkpoint layout, and optimizer state) is
    identical for identical configurations.
    """

    def __init__(self, architecture: str, stages: int = 3, base_channels: int = 16,
                 num_classes: int = 10, seed: int = 0, in_channels: int = 3):
        if architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {architecture!r}; choose from {ARCHITECTURES}")
        if stages < 1:
            raise ValueError("stages must be >= 1")
        if base_channels < 1 or num_classes < 2:
            raise ValueError("base_channels must be >= 1 and num_classes >= 2")
        self.architecture = architecture
        self.stages = stages
        self.base_channels = base_channels
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.representation_layer = "dec1"
        self.penultimate_conv = "dec1.conv2"
        self._build(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (stage - 1)

    def _add_param(self, rng, name: str, shape, fan_in: int | None = None):
        if fan_in is None:  # affine scale/shift
            data = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-limit, limit, size=shape)
        self.params[name] = Tensor(np.asarray(data, dtype=get_default_dtype()),
                                   requires_grad=True)

    def _add_res_block(self, rng, name: str, cin: int, cout: int):
        self._add_param(rng, f"{name}.conv1.w", (cout, cin, 3, 3), fan_in=cin * 9)
        self._add_param(rng, f"{name}.aff1.g", (cout, 1, 1))
        self._add_param(rng, f"{name}.aff1.b", (cout, 1, 1))
        self._add_param(rng, f"{name}.conv2.w", (cout, cout, 3, 3), fan_in=cout * 9)
        self._add_param(rng, f"{name}.aff2.g", (cout, 1, 1))
        self._add_param(rng, f"{name}.aff2.b", (cout, 1, 1))
        if cin != cout:
            self._add_param(rng, f"{name}.proj.w", (cout, cin, 1, 1), fan_in=cin)

    def _build(self, rng):
        s = self.stages
        cin = self.in_channels
        for i in range(1, s + 1):
            self._add_res_block(rng, f"enc{i}", cin, self._channels(i))
            cin = self._channels(i)
        self._add_res_block(rng, "mid", cin, self._channels(s + 1))
        cabove = self._channels(s + 1)
        for i in range(s, 0, -1):
            ci = self._channels(i)
            self._add_param(rng, f"up{i}.w", (cabove, ci, 2, 2), fan_in=cabove * 4)
            self._add_param(rng, f"up{i}.aff.g", (ci, 1, 1))
            self._add_param(rng, f"up{i}.aff.b", (ci, 1, 1))
            merged = 2 * ci if self.architecture == "unet" else ci
            self._add_res_block(rng, f"dec{i}", merged, ci)
            cabove = ci
        self._add_param(rng, "head.w", (self.num_classes, self.base_channels, 1, 1),
                        fan_in=self.base_channels)
        self._add_param(rng, "head.b", (self.num_classes, 1, 1))

    # -- forward ------------------------------------------------------------

    def _affine(self, name: str, h: Tensor) -> Tensor:
        return add(mul(h, self.params[f"{name}.g"]), self.params[f"{name}.b"])

    def _res_block(self, name: str, h: Tensor, capture) -> Tensor:
        p = self.params
        c1 = relu(self._affine(f"{name}.aff1", conv2d(h, p[f"{name}.conv1.w"], padding=1)))
        c2 = self._affine(f"{name}.aff2", conv2d(c1, p[f"{name}.conv2.w"], padding=1))
        shortcut = conv2d(h, p[f"{name}.proj.w"]) if f"{name}.proj.w" in p else h
        out = relu(add(c2, shortcut))
        if capture is not None:
            capture[f"{name}.conv1"] = c1
            capture[f"{name}.conv2"] = c2
            capture[name] = out
        return out

    def forward(self, images, capture: dict | None = None) -> Tensor:
        """Logits (N, num_classes, H, W) for images (N, in_channels, H, W).

        Pass a dict as ``capture`` to receive every named intermediate
        activation (enc{i}/mid/dec{i} blocks, their .conv1/.conv2 outputs,
        up{i} upsampling outputs, and "logits").
        """
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim != 4 or x.data.shape[1] != self.in_channels:
            raise ValueError(
                f"expected (N,{self.in_channels},H,W) input, got {x.data.shape}")
        n, _, h, w = x.data.shape
        factor = 2 ** self.stages
        if h % factor or w % factor:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by {factor}")
        lo, hi = x.data.min(), x.data.max()
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"pixel values outside [0,1]: range [{lo:.4g}, {hi:.4g}]")

        skips = []
        hcur = x
        for i in range(1, self.stages + 1):
            hcur = self._res_block(f"enc{i}", hcur, capture)
            skips.append(hcur)
            hcur = maxpool2d(hcur)
        hcur = self._res_block("mid", hcur, capture)
        for i in range(self.stages, 0, -1):
            hcur = relu(self._affine(f"up{i}.aff",
                                     transposed_conv2d(hcur, self.params[f"up{i}.w"], stride=2)))
            if capture is not None:
                capture[f"up{i}"] = hcur
            skip = skips[i - 1]
            hcur = concat([hcur, skip], axis=1) if self.architecture == "unet" \
                else add(hcur, skip)
            hcur = self._res_block(f"dec{i}", hcur, capture)
        logits = add(conv2d(hcur, self.params["head.w"]), self.params["head.b"])
        if capture is not None:
            capture["logits"] = logits
        return logits

    def representation(self, images) -> Tensor:
        """The activation fed to the final classifier conv (N, base_channels, H, W)."""
        capture: dict = {}
        self.forward(images, capture=capture)
        return capture[self.representation_layer]

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def config(self) -> dict:
        return {
            "architecture": self.architecture,
            "stages": self.stages,
            "base_channels": self.base_channels,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "seed": self.seed,
        }


def build_model(architecture: str, stages: int = 3, base_channels: int = 16,
                num_classes: int = 10, seed: int = 0) -> SegModel:
    """Factory for the two supported architectures with seeded initialization."""
    return SegModel(architecture, stages=stages, base_channels=base_channels,
                    num_classes=num_classes, seed=seed)


@contextmanager
def frozen(model):
    """Temporarily drop gradient tracking on a model's parameters.

    Attacks and evaluation run the forward pass inside this context so the
    graph only tracks image gradients (or nothing at all), which both
    guarantees parameters cannot receive updates and skips kernel-gradient
    work.
    """
    params = model.parameters() if hasattr(model, "parameters") else []
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad = flag


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SegModel, directory: str) -> str:
    """Write weights + manifest; returns the manifest path.

    Weights are raw little-endian bytes in parameter order; the manifest is
    line-oriented key=value text and is written last, so a directory with a
    manifest always has complete weights.
    """
    os.makedirs(directory, exist_ok=True)
    weights_path = os.path.join(directory, CHECKPOINT_WEIGHTS)
    manifest_path = os.path.join(directory, CHECKPOINT_MANIFEST)

    blob = b"".join(np.ascontiguousarray(p.data).tobytes() for p in model.parameters())
    tmp = weights_path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, weights_path)

    dtype = model.parameters()[0].data.dtype if model.params else np.dtype(get_default_dtype())
    lines = [f"format_version={_CHECKPOINT_VERSION}"]
    lines += [f"{k}={v}" for k, v in model.config().items()]
    lines.append(f"dtype={np.dtype(dtype).name}")
    lines += [f"param={name}:{','.join(map(str, t.data.shape))}"
              for name, t in model.params.items()]
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest_path)
    return manifest_path


def _parse_manifest(path: str) -> tuple[dict, list[tuple[str, tuple[int, ...]]]]:
    fields: dict[str, str] = {}
    param_list: list[tuple[str, tuple[int, ...]]] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if key == "param":
                name, _, shape = value.partition(":")
                param_list.append((name, tuple(int(d) for d in shape.split(","))))
            else:
                fields[key] = value
    return fields, param_list


def load_checkpoint(directory: str) -> SegModel:
    """Rebuild a model bit-exactly from a checkpoint directory."""
    manifest_path = os.path.join(directory, CHECKPOINT_MANIFEST)
    weights_path = os.path.join(directory, CHECKPOINT_WEIGHTS)
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    fields, param_list = _parse_manifest(manifest_path)
    if fields.get("format_version") != str(_CHECKPOINT_VERSION):
        raise CheckpointError(
            f"unsupported checkpoint format_version={fields.get('format_version')!r}")
    try:
        model = SegModel(
            fields["architecture"],
            stages=int(fields["stages"]),
            base_channels=int(fields["base_channels"]),
            num_classes=int(fields["num_classes"]),
            seed=int(fields["seed"]),
            in_channels=int(fields.get("in_channels", 3)),
        )
        dtype = np.dtype(fields["dtype"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint manifest: {exc}") from exc

    expected = [(n, t.data.shape) for n, t in model.params.items()]
    if expected != param_list:
        raise CheckpointError("checkpoint parameter list does not match its config")

    with open(weights_path, "rb") as fh:
        blob = fh.read()
    total = sum(int(np.prod(s)) for _, s in param_list) * dtype.itemsize
    if len(blob) != total:
        raise CheckpointError(
            f"weights.bin holds {len(blob)} bytes, manifest implies {total}")
    offset = 0
    for name, shape in param_list:
        nbytes = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)),
                            offset=offset).reshape(shape).copy()
        model.params[name].data = arr
        offset += nbytes
    return model


def model_weights_hash(model: SegModel) -> str:
    """sha256 over parameter names and raw bytes, for provenance manifests."""
    digest = hashlib.sha256()
    for name, t in model.params.items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(t.data).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# activation inspection


def dump_activations(model: SegModel, image, layer: str | None = None,
                     n_maps: int = 16) -> np.ndarray:
    """Tile the first n_maps channel activations of a layer into one image.

    ``image`` is a single (C,H,W) array. Each channel is min-max normalized
    (dividing by max(range, 1e-12), so a constant channel renders as a flat
    tile) and placed on a near-square grid, returned as float values in
    [0, 1]. Layer names are the capture keys of ``forward``; the default is
    the model's second-to-last conv output. ``n_maps`` is an upper bound:
    narrower layers show all their channels.
    """
    layer = layer or model.penultimate_conv
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"expected a single (C,H,W) image, got shape {arr.shape}")
    capture: dict = {}
    with frozen(model):
        model.forward(arr[None], capture=capture)
    if layer not in capture:
        raise ValueError(f"unknown layer {layer!r}; available: {sorted(capture)}")
    acts = capture[layer].data[0]
    channels, h, w = acts.shape
    if n_maps < 1:
        raise ValueError(f"n_maps must be >= 1, got {n_maps}")
    n_maps = min(n_maps, channels)

    cols = math.ceil(math.sqrt(n_maps))
    rows = math.ceil(n_maps / cols)
    grid = np.zeros((rows * h, cols * w))
    for idx in range(n_maps):
        tile = acts[idx]
        span = tile.max() - tile.min()
        tile = (tile - tile.min()) / max(span, 1e-12)
        r, c = divmod(idx, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = tile
    return grid
