"""Desk-scale encoder / FINOLA / upsampler networks built on the autodiff tape.

Parameters live in a flat ``dict[str, np.ndarray]``; every forward pass wraps
them in fresh leaf Vars. Three variants share the encoder:

* ``finola``   image -> encoder -> attention pool -> q -> grid -> up-conv decoder
* ``masked_e`` block crop -> encoder -> pool -> q at the block centre -> grid -> linear patches
* ``masked_b`` block crop -> encoder -> block-offset prediction -> transformer -> linear patches
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import OptimState, Var, ops
from .core import CoeffSet, StepUnit, default_origin
from .masking import OFFSETS, MaskSpec, build_source_map, masked_pixel_mask
from .numerics import make_rng

VARIANTS = ("finola", "masked_e", "masked_b")
UPSAMPLERS = ("upconv", "linear", "transformer_linear")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    downsample: int = 8
    channels: int = 32
    encoder_widths: tuple[int, ...] = (16, 32)
    decoder_widths: tuple[int, ...] = (64, 32, 32)
    upsampler: str = "upconv"
    transformer_depth: int = 2
    transformer_mlp: int = 64
    variant: str = "finola"
    eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        d = self.downsample
        if d < 2 or d & (d - 1):
            raise ValueError(f"downsample must be a power of 2 >= 2, got {d}")
        if self.image_size % d:
            raise ValueError(f"image_size {self.image_size} not divisible by downsample {d}")
        if len(self.encoder_widths) != self.n_stages - 1:
            raise ValueError(f"encoder_widths needs {self.n_stages - 1} entries for downsample {d}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.upsampler not in UPSAMPLERS:
            raise ValueError(f"unknown upsampler {self.upsampler!r}")
        if self.upsampler == "upconv" and len(self.decoder_widths) != self.n_stages:
            raise ValueError(f"decoder_widths needs {self.n_stages} entries for downsample {d}")
        if self.variant == "masked_b" and self.upsampler == "upconv":
            raise ValueError("masked_b needs a linear or transformer_linear upsampler")
        if self.variant != "finola" and self.grid % 2:
            raise ValueError("masked variants need an even grid")

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.downsample))

    @property
    def grid(self) -> int:
        return self.image_size // self.downsample

    @property
    def step_unit(self) -> StepUnit:
        return StepUnit.BLOCK if self.variant == "masked_b" else StepUnit.CELL

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    def fingerprint(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def for_variant(variant: str, **kw) -> ModelConfig:
    """Config with the upsampler each variant uses by default."""
    ups = {"finola": "upconv", "masked_e": "linear", "masked_b": "transformer_linear"}[variant]
    return ModelConfig(variant=variant, upsampler=kw.pop("upsampler", ups), **kw)


# -- parameters ------------------------------------------------------------------


def _encoder_chain(cfg: ModelConfig) -> list[int]:
    return [3, *cfg.encoder_widths, cfg.channels]


def encoder_param_count(cfg: ModelConfig) -> int:
    ch = _encoder_chain(cfg)
    n = 27 * ch[1] + ch[1]
    for k in range(1, len(ch) - 1):
        a, b = ch[k], ch[k + 1]
        n += 9 * a * b + b + 9 * b * b + b
    return n


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.channels
    shapes: dict[str, tuple[int, ...]] = {}
    ch = _encoder_chain(cfg)
    shapes["enc.stem.w"] = (3, 3, 3, ch[1])
    shapes["enc.stem.b"] = (ch[1],)
    for k in range(1, len(ch) - 1):
        shapes[f"enc.s{k}.down.w"] = (3, 3, ch[k], ch[k + 1])
        shapes[f"enc.s{k}.down.b"] = (ch[k + 1],)
        shapes[f"enc.s{k}.conv.w"] = (3, 3, ch[k + 1], ch[k + 1])
        shapes[f"enc.s{k}.conv.b"] = (ch[k + 1],)
    if cfg.variant in ("finola", "masked_e"):
        shapes["pool.query"] = (c,)
        shapes["pool.wk"] = (c, c)
        shapes["pool.wv"] = (c, c)
        shapes["pool.bv"] = (c,)
    for name in ("A", "B", "A_minus", "B_minus"):
        shapes[f"finola.{name}"] = (c, c)
    if cfg.upsampler == "upconv":
        shapes["dec.res1.w"] = (3, 3, c, c)
        shapes["dec.res1.b"] = (c,)
        shapes["dec.res2.w"] = (3, 3, c, c)
        shapes["dec.res2.b"] = (c,)
        prev = c
        for k, w in enumerate(cfg.decoder_widths):
            shapes[f"dec.up{k}.w"] = (3, 3, prev, w)
            shapes[f"dec.up{k}.b"] = (w,)
            prev = w
        shapes["dec.out.w"] = (3, 3, prev, 3)
        shapes["dec.out.b"] = (3,)
    else:
        d = cfg.downsample
        if cfg.upsampler == "transformer_linear":
            for i in range(cfg.transformer_depth):
                p = f"tf{i}."
                for n in ("wq", "wk", "wv", "wo"):
                    shapes[p + n] = (c, c)
                shapes[p + "bo"] = (c,)
                shapes[p + "w1"] = (c, cfg.transformer_mlp)
                shapes[p + "b1"] = (cfg.transformer_mlp,)
                shapes[p + "w2"] = (cfg.transformer_mlp, c)
                shapes[p + "b2"] = (c,)
        shapes["dec.patch.w"] = (c, d * d * 3)
        shapes["dec.patch.b"] = (d * d * 3,)
    return shapes


def _fan_in(name: str, shape) -> int:
    if len(shape) == 4:
        return shape[0] * shape[1] * shape[2]
    return shape[0]


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """LeCun-normal weights (std 1/sqrt(fan_in)), FINOLA matrices std 0.02/sqrt(C), zero biases.

    The small FINOLA scale keeps freshly generated grids close to constant.
    """
    rng = make_rng(cfg.seed if seed is None else seed, 0)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("finola."):
            params[name] = rng.normal(0.0, 0.02 / math.sqrt(cfg.channels), size=shape)
        elif leaf.startswith("b") and len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(_fan_in(name, shape)), size=shape)
    return params


def coeffs_from_params(params: dict[str, np.ndarray], cfg: ModelConfig) -> CoeffSet:
    return CoeffSet(params["finola.A"], params["finola.B"], params["finola.A_minus"], params["finola.B_minus"], cfg.eps, cfg.step_unit)


# -- building blocks ---------------------------------------------------------------


def encoder_forward(p: dict[str, Var], cfg: ModelConfig, images) -> Var:
    """(B, S, S, 3) -> (B, S/D, S/D, C). Also accepts half-size crops."""
    x = ops.conv3x3(images, p["enc.stem.w"], p["enc.stem.b"], stride=2)
    n = len(_encoder_chain(cfg)) - 2
    for k in range(1, n + 1):
        x = ops.gelu(ops.conv3x3(x, p[f"enc.s{k}.down.w"], p[f"enc.s{k}.down.b"], stride=2))
        x = ops.conv3x3(x, p[f"enc.s{k}.conv.w"], p[f"enc.s{k}.conv.b"])
        if k < n:
            x = ops.gelu(x)
    return x


def attn_pool(p: dict[str, Var], feats: Var) -> Var:
    """Single learned query attending over all cells: (B, H, W, C) -> (B, C)."""
    b, h, w, c = feats.shape
    flat = ops.reshape(feats, (b, h * w, c))
    keys = ops.matmul(flat, p["pool.wk"])
    vals = ops.linear(flat, p["pool.wv"], p["pool.bv"])
    query = ops.broadcast_to(ops.reshape(p["pool.query"], (1, 1, c)), (b, 1, c))
    return ops.reshape(ops.single_head_attention(query, keys, vals), (b, c))


def upsample_conv(p: dict[str, Var], cfg: ModelConfig, grid: Var) -> Var:
    """Residual conv at grid resolution, then [x2 nearest, conv, gelu] per stage, then conv to RGB."""
    h = ops.conv3x3(ops.gelu(ops.conv3x3(grid, p["dec.res1.w"], p["dec.res1.b"])), p["dec.res2.w"], p["dec.res2.b"])
    x = ops.add(grid, h)
    for k in range(len(cfg.decoder_widths)):
        x = ops.gelu(ops.conv3x3(ops.upsample_nearest(x), p[f"dec.up{k}.w"], p[f"dec.up{k}.b"]))
    return ops.conv3x3(x, p["dec.out.w"], p["dec.out.b"])


def upsample_linear(p: dict[str, Var], cfg: ModelConfig, grid: Var) -> Var:
    """Each cell -> one shared linear map -> a D x D x 3 patch."""
    b, h, w, c = grid.shape
    d = cfg.downsample
    patches = ops.linear(grid, p["dec.patch.w"], p["dec.patch.b"])
    patches = ops.reshape(patches, (b, h, w, d, d, 3))
    return ops.reshape(ops.transpose(patches, (0, 1, 3, 2, 4, 5)), (b, h * d, w * d, 3))


def transformer_block(p: dict[str, Var], prefix: str, x: Var, eps: float = 1e-6) -> Var:
    """Pre-norm single-head self-attention and MLP over (B, N, C) tokens; no positions."""
    h = ops.position_normalize(x, eps)
    a = ops.single_head_attention(ops.matmul(h, p[prefix + "wq"]), ops.matmul(h, p[prefix + "wk"]), ops.matmul(h, p[prefix + "wv"]))
    x = ops.add(x, ops.linear(a, p[prefix + "wo"], p[prefix + "bo"]))
    h = ops.position_normalize(x, eps)
    m = ops.linear(ops.gelu(ops.linear(h, p[prefix + "w1"], p[prefix + "b1"])), p[prefix + "w2"], p[prefix + "b2"])
    return ops.add(x, m)


# -- differentiable FINOLA -----------------------------------------------------------


class _Steppers:
    """Transposed coefficient Vars, built once per forward pass."""

    def __init__(self, p: dict[str, Var], eps: float):
        self.eps = eps
        self.mats = {k: ops.transpose(p[f"finola.{k}"], (1, 0)) for k in ("A", "B", "A_minus", "B_minus")}

    def step(self, z: Var, key: str) -> Var:
        return ops.add(z, ops.matmul(ops.position_normalize(z, self.eps), self.mats[key]))

    def chain(self, z: Var, n: int, pos: str, neg: str) -> Var:
        for _ in range(abs(n)):
            z = self.step(z, pos if n > 0 else neg)
        return z

    def fill(self, seed: Var, length: int, start: int, pos: str, neg: str) -> Var:
        cells = [None] * length
        cells[start] = seed
        for i in range(start + 1, length):
            cells[i] = self.step(cells[i - 1], pos)
        for i in range(start - 1, -1, -1):
            cells[i] = self.step(cells[i + 1], neg)
        return ops.stack(cells, axis=0)


def generate_grid(p: dict[str, Var], q: Var, height: int, width: int, origin=None, eps: float = 1e-6) -> Var:
    """Differentiable two-pass generation: (B, C) -> (B, H, W, C)."""
    x0, y0 = default_origin(height, width) if origin is None else origin
    st = _Steppers(p, eps)
    row = st.fill(q, width, x0, "A", "A_minus")  # (W, B, C)
    f1 = st.fill(row, height, y0, "B", "B_minus")  # (H, W, B, C)
    col = st.fill(q, height, y0, "B", "B_minus")  # (H, B, C)
    f2 = st.fill(col, width, x0, "A", "A_minus")  # (W, H, B, C)
    f1 = ops.transpose(f1, (2, 0, 1, 3))
    f2 = ops.transpose(f2, (2, 1, 0, 3))
    return ops.mul(ops.add(f1, f2), 0.5)


def blockwise_grid(p: dict[str, Var], block: Var, specs: list[MaskSpec], eps: float = 1e-6) -> Var:
    """Differentiable block-offset prediction: (B, H/2, W/2, C) -> (B, H, W, C)."""
    b, bh, bw, c = block.shape
    st = _Steppers(p, eps)
    preds = []
    for u, v in OFFSETS:
        if u == 0 or v == 0:
            z = st.chain(st.chain(block, u, "A", "A_minus"), v, "B", "B_minus")
        else:
            hv = st.chain(st.chain(block, u, "A", "A_minus"), v, "B", "B_minus")
            vh = st.chain(st.chain(block, v, "B", "B_minus"), u, "A", "A_minus")
            z = ops.mul(ops.add(hv, vh), 0.5)
        preds.append(z)
    table = ops.reshape(ops.transpose(ops.stack(preds, axis=0), (1, 0, 2, 3, 4)), (b, 9 * bh * bw, c))
    idx = []
    for spec in specs:
        sm = build_source_map(spec)
        idx.append((sm.offset_index() * bh * bw + sm.src_y * bw + sm.src_x).ravel())
    h, w = specs[0].height, specs[0].width
    return ops.reshape(ops.gather_rows(table, np.stack(idx)), (b, h, w, c))


# -- pipelines ---------------------------------------------------------------------------


def leaves(params: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, Var]:
    return {k: Var(v, requires_grad=requires_grad) for k, v in params.items()}


def crop_blocks(images: np.ndarray, specs: list[MaskSpec], patch: int) -> np.ndarray:
    out = []
    for img, s in zip(images, specs):
        y, x = s.r * patch, s.c * patch
        out.append(img[y:y + s.block_height * patch, x:x + s.block_width * patch])
    return np.stack(out)


def pipeline_forward(p: dict[str, Var], cfg: ModelConfig, images, specs: list[MaskSpec] | None = None) -> tuple[Var, dict]:
    """Reconstruct a batch of (B, S, S, 3) images. Masked variants need one MaskSpec per image."""
    images = np.asarray(images.value if isinstance(images, Var) else images, dtype=np.float64)
    n = cfg.grid
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"expected (B, {cfg.image_size}, {cfg.image_size}, 3) images, got {images.shape}")
    if cfg.variant == "finola":
        feats = encoder_forward(p, cfg, images)
        q = attn_pool(p, feats)
        grid = generate_grid(p, q, n, n, eps=cfg.eps)
        return upsample_conv(p, cfg, grid), {"q": q, "grid": grid}
    if specs is None or len(specs) != images.shape[0]:
        raise ValueError(f"{cfg.variant} needs one MaskSpec per image")
    crops = crop_blocks(images, specs, cfg.downsample)
    feats = encoder_forward(p, cfg, crops)
    if cfg.variant == "masked_e":
        q = attn_pool(p, feats)
        grids = [generate_grid(p, q[i:i + 1], n, n, s.block_center(), cfg.eps) for i, s in enumerate(specs)]
        grid = ops.concat(grids, axis=0)
        aux = {"q": q, "grid": grid}
    else:
        grid = blockwise_grid(p, feats, specs, cfg.eps)
        aux = {"block": feats, "grid": grid}
    if cfg.upsampler == "upconv":
        return upsample_conv(p, cfg, grid), aux
    if cfg.upsampler == "transformer_linear":
        b = grid.shape[0]
        x = ops.reshape(grid, (b, n * n, cfg.channels))
        for i in range(cfg.transformer_depth):
            x = transformer_block(p, f"tf{i}.", x, cfg.eps)
        grid = ops.reshape(x, (b, n, n, cfg.channels))
    return upsample_linear(p, cfg, grid), aux


def loss_mask(cfg: ModelConfig, specs: list[MaskSpec] | None):
    if cfg.variant == "finola" or specs is None:
        return None
    return np.stack([masked_pixel_mask(s, cfg.downsample) for s in specs])


def pipeline_loss(p: dict[str, Var], cfg: ModelConfig, images, specs=None, targets=None) -> Var:
    """MSE against ``targets`` (default: the inputs); masked variants score masked pixels only."""
    recon, _ = pipeline_forward(p, cfg, images, specs)
    targets = images if targets is None else targets
    return ops.mse(recon, targets, loss_mask(cfg, specs))


def reconstruct(params: dict[str, np.ndarray], cfg: ModelConfig, images, specs=None) -> np.ndarray:
    recon, _ = pipeline_forward(leaves(params, False), cfg, images, specs)
    return recon.value


def encode(params: dict[str, np.ndarray], cfg: ModelConfig, images) -> np.ndarray:
    """Latent vectors q for a batch of full images (finola variant)."""
    p = leaves(params, False)
    return attn_pool(p, encoder_forward(p, cfg, np.asarray(images, dtype=np.float64))).value


def decode_q(params: dict[str, np.ndarray], cfg: ModelConfig, q) -> np.ndarray:
    """Images from latent vectors through generation and the up-conv decoder."""
    p = leaves(params, False)
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    grid = generate_grid(p, Var(q), cfg.grid, cfg.grid, eps=cfg.eps)
    return upsample_conv(p, cfg, grid).value


def decode_grid(params: dict[str, np.ndarray], cfg: ModelConfig, grid) -> np.ndarray:
    p = leaves(params, False)
    return upsample_conv(p, cfg, Var(np.asarray(grid, dtype=np.float64))).value


# -- checkpoints ---------------------------------------------------------------------------

_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8"}
_TAGS = {"<f8": 0, "<f4": 1, "<i8": 2}
_HEAD = struct.Struct("<4sH32sI")
CHECKPOINT_VERSION = 1


class FingerprintMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optim: OptimState | None = None
    step: int = 0
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path, storage: str = "f64") -> None:
        """Write the FNLA container; ``storage="f32"`` stores parameters in single precision."""
        ftag = {"f64": "<f8", "f32": "<f4"}[storage]
        tensors: list[tuple[str, np.ndarray, str]] = [(f"param/{k}", v, ftag) for k, v in sorted(self.params.items())]
        if self.optim is not None:
            o = self.optim
            tensors.append(("optim/hparams", np.array([o.lr, o.beta1, o.beta2, o.eps, o.weight_decay]), "<f8"))
            tensors.append(("optim/step", np.array([o.step]), "<i8"))
            tensors += [(f"optim/m/{k}", v, "<f8") for k, v in sorted(o.m.items())]
            tensors += [(f"optim/v/{k}", v, "<f8") for k, v in sorted(o.v.items())]
        tensors.append(("step", np.array([self.step]), "<i8"))
        tensors += [(f"extra/{k}", v, "<f8") for k, v in sorted(self.extra.items())]
        path = Path(path)
        with open(path, "wb") as f:
            f.write(_HEAD.pack(b"FNLA", CHECKPOINT_VERSION, self.config.fingerprint(), len(tensors)))
            for name, arr, dt in tensors:
                raw = name.encode()
                arr = np.ascontiguousarray(arr, dtype=dt)
                f.write(struct.pack("<I", len(raw)) + raw)
                f.write(struct.pack("<BI", _TAGS[dt], arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                f.write(arr.tobytes())

    @classmethod
    def load(cls, path, config: ModelConfig) -> "Checkpoint":
        raw = Path(path).read_bytes()
        magic, version, fp, count = _HEAD.unpack_from(raw)
        if magic != b"FNLA":
            raise ValueError(f"{path}: not an FNLA checkpoint")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        if fp != config.fingerprint():
            raise FingerprintMismatch(f"{path}: checkpoint was written for a different model config")
        off = _HEAD.size
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + n].decode()
            off += n
            tag, ndim = struct.unpack_from("<BI", raw, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            dt = np.dtype(_DTYPES[tag])
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(raw, dtype=dt, count=size, offset=off).reshape(shape)
            off += size * dt.itemsize
        params = {k[6:]: v.astype(np.float64) for k, v in tensors.items() if k.startswith("param/")}
        optim = None
        if "optim/step" in tensors:
            lr, b1, b2, eps, wd = tensors["optim/hparams"]
            optim = OptimState(lr=float(lr), beta1=float(b1), beta2=float(b2), eps=float(eps), weight_decay=float(wd), step=int(tensors["optim/step"][0]))
            optim.m = {k[8:]: v.copy() for k, v in tensors.items() if k.startswith("optim/m/")}
            optim.v = {k[8:]: v.copy() for k, v in tensors.items() if k.startswith("optim/v/")}
        extra = {k[6:]: v.copy() for k, v in tensors.items() if k.startswith("extra/")}
        return cls(config, params, optim, int(tensors["step"][0]), extra)
