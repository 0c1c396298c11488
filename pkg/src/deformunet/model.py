"""End-to-end reconstruction network.

Input module (strided conv patch embedding), six residual transformer
blocks in a U shape with two skip fusions, a final 3x3 convolution, an
inner residual back to the embedded input, and an output module
(1x1 conv, depth-to-space, zero-initialized 3x3 conv) with an outer
residual onto the network input, so the untrained model is the identity.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .attention import CaptureRequest, DeformCapture, _trunc_normal
from .blocks import (BlockConfig, BlockParams, FuseParams, init_block_params,
                     init_fuse_params, residual_block_forward, skip_fuse)
from .engine import (EngineError, ShapeError, Tensor, get_dtype,
                     load_array_bytes, save_array_bytes)
from .fileio import atomic_write_bytes, atomic_write_text

BLOCK_IDS = ("E1", "E2", "E3", "D3", "D2", "D1")

DEFAULT_CHANNELS = (90, 180, 360, 720, 360, 180)
DEFAULT_HEADS = (6, 12, 24, 24, 24, 12)

PRESET_NAMES = tuple(
    f"{pattern}-{off}-{patch}"
    for pattern in ("KKDDKK", "KKKKKK")
    for off in ("O", "NO")
    for patch in (1, 2, 4)
)


@dataclass
class ModelConfig:
    patch_size: int = 1
    block_pattern: str = "KKDDKK"
    offsets_enabled: bool = True
    layers: int = 6
    window: int = 8
    downsample: int = 1
    channels: Tuple[int, ...] = DEFAULT_CHANNELS
    heads: Tuple[int, ...] = DEFAULT_HEADS
    input_extent: Tuple[int, int] = (256, 256)
    offset_scale: float = 1.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.heads = tuple(int(n) for n in self.heads)
        self.input_extent = tuple(int(e) for e in self.input_extent)
        p = self.block_pattern
        if len(p) != 6 or any(ch not in "KD" for ch in p):
            raise ValueError(f"block pattern must be 6 chars over K/D, got {p!r}")
        if p[:3] != p[3:][::-1]:
            raise ValueError(f"block pattern must have mirrored encoder/decoder halves, got {p!r}")
        if len(self.channels) != 6 or len(self.heads) != 6:
            raise ValueError("channels and heads must list one entry per block")
        c = self.channels
        chain_ok = (c[1] == 2 * c[0] and c[2] == 2 * c[1] and c[3] == 2 * c[2]
                    and c[4] == c[3] // 2 and c[5] == c[4] // 2 and c[0] == c[5] // 2)
        if not chain_ok:
            raise ValueError(f"channel list {c} breaks the 2x merge/expand chain")
        for ci, ni in zip(self.channels, self.heads):
            if ci % ni:
                raise ValueError(f"channels {ci} not divisible by heads {ni}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.window < 2 or self.window % self.downsample:
            raise ValueError(f"window {self.window} incompatible with downsample {self.downsample}")
        h, w = self.input_extent
        m = self.required_multiple
        if h % m or w % m:
            raise ValueError(f"input extent {h}x{w} must be a multiple of "
                             f"patch_size*4*window = {m}")
        if "D" in p and h != w:
            raise ValueError("dense blocks need a square input extent")

    @property
    def required_multiple(self) -> int:
        return self.patch_size * 4 * self.window

    def stage_plan(self) -> List[dict]:
        """Geometry of every block: kind, direction, channels, heads, resolution."""
        h0 = self.input_extent[0] // self.patch_size
        w0 = self.input_extent[1] // self.patch_size
        scale = {"E1": 1, "E2": 2, "E3": 4, "D3": 8, "D2": 4, "D1": 2}
        plan = []
        for i, bid in enumerate(BLOCK_IDS):
            plan.append({
                "id": bid,
                "kind": self.block_pattern[i],
                "direction": "down" if i < 3 else "up",
                "channels": self.channels[i],
                "heads": self.heads[i],
                "resolution": (h0 // scale[bid], w0 // scale[bid]),
            })
        return plan

    def block_config(self, block_id: str) -> BlockConfig:
        i = BLOCK_IDS.index(block_id)
        return BlockConfig(
            kind=self.block_pattern[i],
            direction="down" if i < 3 else "up",
            layers=self.layers,
            channels=self.channels[i],
            heads=self.heads[i],
            window=self.window,
            downsample=self.downsample,
            offsets_enabled=self.offsets_enabled,
            offset_scale=self.offset_scale,
        )


def preset_config(name: str, size: int = 256) -> ModelConfig:
    """Named variants: <pattern>-<O|NO>-<patch>, e.g. KKDDKK-O-1."""
    parts = name.split("-")
    if len(parts) != 3 or parts[1] not in ("O", "NO"):
        raise ValueError(f"unknown preset {name!r}; expected e.g. 'KKDDKK-O-1'")
    pattern, off, patch = parts
    return ModelConfig(
        patch_size=int(patch),
        block_pattern=pattern,
        offsets_enabled=off == "O",
        input_extent=(size, size),
    )


class ParamStore:
    """Ordered name -> tensor registry; each learnable registered exactly once."""

    def __init__(self):
        self._entries: Dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> None:
        if name in self._entries:
            raise EngineError(f"parameter {name!r} registered twice")
        if not tensor.requires_grad:
            raise EngineError(f"parameter {name!r} does not require grad")
        self._entries[name] = tensor

    def items(self):
        return self._entries.items()

    def names(self):
        return list(self._entries)

    def tensors(self):
        return list(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def total_parameters(self) -> int:
        return sum(t.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.zero_grad()


@dataclass
class ModelParams:
    im_w: Tensor
    im_b: Tensor
    blocks: Dict[str, BlockParams]
    fuse_d2: FuseParams
    fuse_d1: FuseParams
    utm_conv_w: Tensor
    utm_conv_b: Tensor
    om_pre_w: Tensor
    om_pre_b: Tensor
    om_out_w: Tensor
    om_out_b: Tensor
    store: ParamStore = field(default=None, repr=False)


def _register_tree(store: ParamStore, prefix: str, obj) -> None:
    if isinstance(obj, Tensor):
        store.register(prefix, obj)
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.name == "store":
                continue
            _register_tree(store, f"{prefix}.{f.name}" if prefix else f.name,
                           getattr(obj, f.name))
    elif isinstance(obj, dict):
        for k, v in obj.items():
            _register_tree(store, f"{prefix}.{k}" if prefix else str(k), v)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _register_tree(store, f"{prefix}.{i}", v)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministic initialization; the output module's final convolution
    and the offset nets' last layers start at zero."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dt = get_dtype()
    s = cfg.patch_size
    c1 = cfg.channels[0]

    im_w = Tensor(_trunc_normal(rng, (c1, 1, s, s)).astype(dt), requires_grad=True)
    im_b = Tensor(np.zeros(c1, dtype=dt), requires_grad=True)

    blocks: Dict[str, BlockParams] = {}
    for stage in cfg.stage_plan():
        bc = cfg.block_config(stage["id"])
        blocks[stage["id"]] = init_block_params(bc, stage["resolution"], rng)

    params = ModelParams(
        im_w=im_w, im_b=im_b,
        blocks=blocks,
        fuse_d2=init_fuse_params(cfg.channels[4], rng),
        fuse_d1=init_fuse_params(cfg.channels[5], rng),
        utm_conv_w=Tensor(_trunc_normal(rng, (c1, c1, 3, 3)).astype(dt), requires_grad=True),
        utm_conv_b=Tensor(np.zeros(c1, dtype=dt), requires_grad=True),
        om_pre_w=Tensor(_trunc_normal(rng, (s * s * c1, c1, 1, 1)).astype(dt), requires_grad=True),
        om_pre_b=Tensor(np.zeros(s * s * c1, dtype=dt), requires_grad=True),
        om_out_w=Tensor(np.zeros((1, c1, 3, 3), dtype=dt), requires_grad=True),
        om_out_b=Tensor(np.zeros(1, dtype=dt), requires_grad=True),
    )
    store = ParamStore()
    _register_tree(store, "", params)
    params.store = store
    return params


@dataclass
class ModelCaptureRequest:
    """Record deformation state (and optionally one query's attention rows)
    for one layer of one block. Query coordinates live on that block's
    feature map."""
    block: str
    layer: int = 0
    query: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.block not in BLOCK_IDS:
            raise ValueError(f"unknown block {self.block!r}; expected one of {BLOCK_IDS}")


def input_module(cfg: ModelConfig, params: ModelParams, x: Tensor) -> Tensor:
    """Patch embedding: conv with kernel = stride = patch size."""
    return ops.conv2d(x, params.im_w, params.im_b, stride=cfg.patch_size)


def output_module(cfg: ModelConfig, params: ModelParams, f: Tensor) -> Tensor:
    """1x1 conv to s^2*C, depth-to-space by s, 3x3 conv to one channel."""
    y = ops.conv2d(f, params.om_pre_w, params.om_pre_b)
    y = ops.pixel_shuffle(y, cfg.patch_size)
    return ops.conv2d(y, params.om_out_w, params.om_out_b, padding=1)


def model_forward(cfg: ModelConfig, params: ModelParams, x,
                  capture: Optional[ModelCaptureRequest] = None
                  ) -> Tuple[Tensor, Optional[DeformCapture]]:
    """Reconstruct a zero-filled input; output shape equals input shape."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=get_dtype()))
    squeeze = x.ndim == 3
    x4 = ops.reshape(x, (1,) + x.shape) if squeeze else x
    if x4.ndim != 4 or x4.shape[1] != 1:
        raise ShapeError(f"model wants [1,h,w] or [N,1,h,w], got {x.shape}")
    h, w = x4.shape[2], x4.shape[3]
    m = cfg.required_multiple
    if h % m or w % m:
        raise ShapeError(f"input extent {h}x{w} must be a multiple of "
                         f"patch_size*4*window = {m}")
    if (h, w) != tuple(cfg.input_extent):
        raise ShapeError(f"input extent {h}x{w} does not match config "
                         f"{cfg.input_extent} (bias tables are sized at init)")

    def run(block_id: str, inp: Tensor):
        req = None
        layer = None
        if capture is not None and capture.block == block_id:
            if not (0 <= capture.layer < cfg.layers):
                raise ValueError(f"capture layer {capture.layer} outside 0..{cfg.layers - 1}")
            req = CaptureRequest(query=capture.query)
            layer = capture.layer
        return residual_block_forward(cfg.block_config(block_id), params.blocks[block_id],
                                      inp, capture_layer=layer, capture=req)

    f_im = input_module(cfg, params, x4)
    cap_out: Optional[DeformCapture] = None

    e1, cap = run("E1", f_im)
    cap_out = cap or cap_out
    e2, cap = run("E2", e1)
    cap_out = cap or cap_out
    e3, cap = run("E3", e2)
    cap_out = cap or cap_out
    d3, cap = run("D3", e3)
    cap_out = cap or cap_out
    d2, cap = run("D2", skip_fuse(params.fuse_d2, d3, e2))
    cap_out = cap or cap_out
    d1, cap = run("D1", skip_fuse(params.fuse_d1, d2, e1))
    cap_out = cap or cap_out

    f_utm = ops.conv2d(d1, params.utm_conv_w, params.utm_conv_b, padding=1)
    f_om = output_module(cfg, params, ops.add(f_utm, f_im))
    out = ops.add(f_om, x4)
    return (ops.reshape(out, out.shape[1:]) if squeeze else out), cap_out


# ----------------------------------------------------------------------
# plain-text config files and checkpoints
# ----------------------------------------------------------------------

def model_config_to_text(cfg: ModelConfig) -> str:
    lines = [
        f"patch_size = {cfg.patch_size}",
        f"block_pattern = {cfg.block_pattern}",
        f"offsets_enabled = {str(cfg.offsets_enabled).lower()}",
        f"layers = {cfg.layers}",
        f"window = {cfg.window}",
        f"downsample = {cfg.downsample}",
        f"channels = {','.join(str(c) for c in cfg.channels)}",
        f"heads = {','.join(str(n) for n in cfg.heads)}",
        f"input_height = {cfg.input_extent[0]}",
        f"input_width = {cfg.input_extent[1]}",
        f"offset_scale = {cfg.offset_scale}",
    ]
    return "\n".join(lines) + "\n"


def parse_kv_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (need key = value): {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _parse_bool(v: str) -> bool:
    lv = v.lower()
    if lv in ("true", "1", "yes", "on"):
        return True
    if lv in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def model_config_from_mapping(m: Dict[str, str]) -> ModelConfig:
    if "preset" in m:
        size = int(m.get("input_height", m.get("size", 256)))
        base = preset_config(m["preset"], size=size)
        values = dataclasses.asdict(base)
    else:
        values = dataclasses.asdict(ModelConfig())
    values["input_extent"] = tuple(values["input_extent"])
    values["channels"] = tuple(values["channels"])
    values["heads"] = tuple(values["heads"])
    ih, iw = values["input_extent"]
    for key, val in m.items():
        if key in ("patch_size", "layers", "window", "downsample"):
            values[key] = int(val)
        elif key == "block_pattern":
            values[key] = val
        elif key == "offsets_enabled":
            values[key] = _parse_bool(val)
        elif key in ("channels", "heads"):
            values[key] = tuple(int(t) for t in val.split(","))
        elif key == "input_height":
            ih = int(val)
        elif key == "input_width":
            iw = int(val)
        elif key == "offset_scale":
            values[key] = float(val)
        # unknown keys belong to other sections (trainer, masks) and are ignored
    values["input_extent"] = (ih, iw)
    return ModelConfig(**values)


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams) -> None:
    """Concatenated binary arrays plus a manifest of (name, shape, offset)."""
    blob = bytearray()
    lines = []
    for name, t in params.store.items():
        chunk = save_array_bytes(t.data)
        shape = "x".join(str(e) for e in t.shape) if t.ndim else "scalar"
        lines.append(f"{name}\t{shape}\t{len(blob)}")
        blob.extend(chunk)
    path = str(path)
    atomic_write_bytes(path, bytes(blob))
    atomic_write_text(path + ".manifest", "\n".join(lines) + "\n")
    atomic_write_text(path + ".cfg", model_config_to_text(cfg))


def load_checkpoint(path) -> Tuple[ModelConfig, ModelParams]:
    path = str(path)
    with open(path + ".cfg", "r", encoding="utf-8") as f:
        cfg = model_config_from_mapping(parse_kv_text(f.read()))
    with open(path, "rb") as f:
        blob = f.read()
    with open(path + ".manifest", "r", encoding="utf-8") as f:
        manifest = [ln for ln in f.read().splitlines() if ln.strip()]
    params = init_params(cfg, seed=0)
    seen = set()
    for line in manifest:
        name, shape_s, offset_s = line.split("\t")
        arr = load_array_bytes(blob[int(offset_s):])
        if name not in params.store:
            raise EngineError(f"checkpoint names unknown parameter {name!r}")
        t = params.store[name]
        if arr.shape != t.shape:
            raise ShapeError(f"checkpoint {name}: shape {arr.shape} vs expected {t.shape}")
        t.data = arr.astype(get_dtype())
        seen.add(name)
    missing = [n for n in params.store.names() if n not in seen]
    if missing:
        raise EngineError(f"checkpoint is missing parameters: {missing[:3]}...")
    return cfg, params
