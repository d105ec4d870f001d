"""Knowledge bank, conditional prompt generator and two-way guidance module.

All forward functions take a flat ``dict[str, Tensor]`` of parameters and
numpy token arrays of shape ``(batch, l, d)``; nothing here mutates state.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    Z: int = 5
    num_heads: int = 8
    generator_blocks: int = 2
    guidance_blocks: int = 2
    num_classes: int = 5
    task: str = "classification"
    residual: bool = True
    norm: bool = True
    ffn: bool = True
    ffn_mult: int = 2

    @property
    def h(self) -> int:
        return self.d

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 1

    def validate(self) -> None:
        if self.d < 1 or self.Z < 1:
            raise ValueError("d and Z must be positive")
        if self.h % self.num_heads:
            raise ValueError(f"h={self.h} is not divisible by num_heads={self.num_heads}")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n) for n, t in self.tensors.items()},
        )

    def with_tensors(self, tensors: dict[str, Tensor]) -> "ModelParameters":
        return ModelParameters(self.config, dict(tensors))

    @property
    def bank(self) -> np.ndarray:
        return self.tensors["bank"].data


# ---------------------------------------------------------------- init


def _attention_shapes(prefix: str, d: int, h: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.wq": (d, h),
        f"{prefix}.wk": (d, h),
        f"{prefix}.wv": (d, h),
        f"{prefix}.wo": (h, d),
    }


def _norm_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.gamma": (d,), f"{prefix}.beta": (d,)}


def _ffn_shapes(prefix: str, d: int, mult: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.w1": (d, mult * d),
        f"{prefix}.b1": (mult * d,),
        f"{prefix}.w2": (mult * d, d),
        f"{prefix}.b2": (d,),
    }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d, cfg.h
    shapes: dict[str, tuple[int, ...]] = {"bank": (cfg.Z, d), "cls": (1, d)}

    def sublayer(prefix: str) -> None:
        if cfg.norm:
            shapes.update(_norm_shapes(f"{prefix}.norm", d))
        shapes.update(_attention_shapes(prefix, d, h))

    def ffn(prefix: str) -> None:
        if cfg.ffn:
            if cfg.norm:
                shapes.update(_norm_shapes(f"{prefix}.norm", d))
            shapes.update(_ffn_shapes(prefix, d, cfg.ffn_mult))

    for b in range(cfg.generator_blocks):
        sublayer(f"gen.{b}.cross")
        ffn(f"gen.{b}.ffn")
    for b in range(cfg.guidance_blocks):
        sublayer(f"gm.{b}.self")
        sublayer(f"gm.{b}.p2i")
        ffn(f"gm.{b}.ffn")
        sublayer(f"gm.{b}.i2p")
    if cfg.guidance_blocks:
        sublayer("gm.final.p2i")
    if cfg.norm:
        shapes.update(_norm_shapes("head.norm", d))
    shapes.update({"head.w1": (d, d), "head.b1": (d,), "head.w2": (d, cfg.out_dim), "head.b2": (cfg.out_dim,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParameters:
    """Fan-in uniform projections, N(0, 1/sqrt(d)) bank and CLS, unit norms."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("bank", "cls"):
            arr = rng.normal(0.0, 1.0 / np.sqrt(cfg.d), size=shape)
        elif leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("beta", "b1", "b2"):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelParameters(cfg, tensors)


def generator_names(params: ModelParameters) -> list[str]:
    return ["bank"] + [n for n in params.tensors if n.startswith("gen.")]


# ---------------------------------------------------------------- layers


def _ln(p: dict[str, Tensor], prefix: str, x: Tensor, cfg: ModelConfig) -> Tensor:
    if not cfg.norm:
        return x
    return T.layer_norm(x, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"])


def multi_head_attention(
    p: dict[str, Tensor], prefix: str, q_in: Tensor, kv_in: Tensor, num_heads: int
) -> Tensor:
    """Scaled dot-product attention; ``q_in`` (B, nq, d), ``kv_in`` (B, nk, d)."""
    B, nq, _ = q_in.shape
    nk = kv_in.shape[1]
    h = p[f"{prefix}.wq"].shape[1]
    hd = h // num_heads

    def heads(x: Tensor, n: int) -> Tensor:
        return T.permute(T.reshape(x, (B, n, num_heads, hd)), (0, 2, 1, 3))

    q = heads(q_in @ p[f"{prefix}.wq"], nq)
    k = heads(kv_in @ p[f"{prefix}.wk"], nk)
    v = heads(kv_in @ p[f"{prefix}.wv"], nk)
    attn = T.softmax(T.scale(q @ T.transpose(k), 1.0 / np.sqrt(hd)), axis=-1)
    out = T.reshape(T.permute(attn @ v, (0, 2, 1, 3)), (B, nq, h))
    return out @ p[f"{prefix}.wo"]


def _attend(p, prefix: str, stream: Tensor, context: Tensor | None, cfg: ModelConfig) -> Tensor:
    q = _ln(p, prefix, stream, cfg)
    kv = q if context is None else context
    out = multi_head_attention(p, prefix, q, kv, cfg.num_heads)
    return stream + out if cfg.residual else out


def _feed_forward(p, prefix: str, x: Tensor, cfg: ModelConfig) -> Tensor:
    if not cfg.ffn:
        return x
    hdn = T.gelu(_ln(p, prefix, x, cfg) @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    out = hdn @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]
    return x + out if cfg.residual else out


def _check_tokens(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 2:
        tokens = tokens[None]
    if tokens.ndim != 3 or tokens.shape[-1] != cfg.d:
        raise ShapeError(f"expected tokens of shape (batch, l, {cfg.d}), got {tokens.shape}")
    if tokens.shape[0] == 0:
        raise ShapeError("empty token batch")
    return tokens


# ---------------------------------------------------------------- generator


def per_image_prompts(p: dict[str, Tensor], cfg: ModelConfig, tokens: np.ndarray, bank: Tensor | None = None) -> Tensor:
    """Generator output for each image separately: (B, Z, d)."""
    tokens = _check_tokens(tokens, cfg)
    bank = p["bank"] if bank is None else bank
    B = tokens.shape[0]
    q = T.broadcast_to(bank, (B, cfg.Z, cfg.d))
    e = Tensor(tokens)
    for b in range(cfg.generator_blocks):
        q = _attend(p, f"gen.{b}.cross", q, e, cfg)
        q = _feed_forward(p, f"gen.{b}.ffn", q, cfg)
    return q


def pool_prompts(prompts: Tensor) -> Tensor:
    """Batch-average of per-image prompts.

    Computed as ``first + mean(x - first)`` so a batch of identical images
    reproduces the single-image prompt bit for bit.
    """
    first = prompts[0]
    return first + T.mean(prompts - first, axis=0)


def generate_prompt(p: dict[str, Tensor], cfg: ModelConfig, tokens: np.ndarray) -> Tensor:
    return pool_prompts(per_image_prompts(p, cfg, tokens))


# ---------------------------------------------------------------- guidance


def guide(p: dict[str, Tensor], cfg: ModelConfig, prompt, tokens: np.ndarray) -> Tensor:
    """Run the two-way blocks; returns the final CLS features (B, d)."""
    tokens = _check_tokens(tokens, cfg)
    prompt = T.as_tensor(prompt)
    if prompt.shape != (cfg.Z, cfg.d):
        raise ShapeError(f"prompt must be ({cfg.Z}, {cfg.d}), got {prompt.shape}")
    B, l, _ = tokens.shape
    n = cfg.Z + 1
    s = T.broadcast_to(T.concat([prompt, p["cls"]], axis=0), (B, n, cfg.d))
    e = Tensor(tokens)
    for b in range(cfg.guidance_blocks):
        s = _attend(p, f"gm.{b}.self", s, None, cfg)
        s = _attend(p, f"gm.{b}.p2i", s, e, cfg)
        s = _feed_forward(p, f"gm.{b}.ffn", s, cfg)
        e = _attend(p, f"gm.{b}.i2p", e, s, cfg)
    if cfg.guidance_blocks:
        # lets the last image-side update reach the CLS position
        s = _attend(p, "gm.final.p2i", s, e, cfg)
    return s[:, n - 1, :]


def head(p: dict[str, Tensor], cfg: ModelConfig, feats: Tensor) -> Tensor:
    x = _ln(p, "head", feats, cfg)
    hdn = T.gelu(x @ p["head.w1"] + p["head.b1"])
    return hdn @ p["head.w2"] + p["head.b2"]


def guide_and_predict(p: dict[str, Tensor], cfg: ModelConfig, prompt, tokens: np.ndarray) -> Tensor:
    """Logits (B, K) for classification, predictions (B,) for regression."""
    out = head(p, cfg, guide(p, cfg, prompt, tokens))
    if cfg.task == "regression":
        out = T.reshape(out, (out.shape[0],))
    return out


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"VDPC"
_CKPT_VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4"}


def save_checkpoint(params: ModelParameters, meta: dict, path, storage: str = "f64") -> None:
    """Self-describing container: header, JSON meta, tensor table, blob, CRC32."""
    code = 0 if storage == "f64" else 1
    dtype = np.dtype(_DTYPES[code])
    meta = dict(meta)
    meta["config"] = params.config.to_dict()
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    table = bytearray()
    blob = bytearray()
    names = sorted(params.tensors)
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name].data, dtype=dtype)
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", len(blob), arr.nbytes)
        blob += arr.tobytes()
    body = (
        _CKPT_MAGIC
        + struct.pack("<HII", _CKPT_VERSION, len(meta_bytes), len(names))
        + meta_bytes
        + bytes(table)
        + bytes(blob)
    )
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, like: ModelParameters | None = None) -> tuple[ModelParameters, dict]:
    """Read a checkpoint; with ``like`` every tensor shape must match it."""
    buf = Path(path).read_bytes()
    if len(buf) < 18 or buf[:4] != _CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    version, meta_len, count = struct.unpack_from("<HII", body, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 14
    meta = json.loads(body[off : off + meta_len])
    off += meta_len
    entries = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + n].decode()
        off += n
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        start, nbytes = struct.unpack_from("<QQ", body, off)
        off += 16
        entries.append((name, code, shape, start, nbytes))
    blob_start = off
    tensors = {}
    for name, code, shape, start, nbytes in entries:
        raw = body[blob_start + start : blob_start + start + nbytes]
        arr = np.frombuffer(raw, dtype=_DTYPES[code]).astype(np.float64).reshape(shape)
        tensors[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    cfg = ModelConfig(**meta["config"])
    if like is not None:
        if set(like.tensors) != set(tensors):
            diff = sorted(set(like.tensors) ^ set(tensors))
            raise CheckpointError(f"tensor set mismatch: {diff[0]}")
        for name, t in like.tensors.items():
            if tensors[name].shape != t.shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {tensors[name].shape}, expected {t.shape}"
                )
    return ModelParameters(cfg, tensors), meta


def transplant(target: ModelParameters, source: ModelParameters, names) -> ModelParameters:
    """Copy ``names`` from ``source`` into a copy of ``target`` after shape checks."""
    out = target.copy()
    for n in names:
        if source.tensors[n].shape != target.tensors[n].shape:
            raise CheckpointError(f"tensor {n!r} shape mismatch during transplant")
        out.tensors[n] = Tensor(source.tensors[n].data.copy(), requires_grad=True, name=n)
    return out


def stripped_config(d: int, Z: int = 1) -> ModelConfig:
    """Attention-only generator: one block, one head, no norm/FFN/residual."""
    return ModelConfig(d=d, Z=Z, num_heads=1, generator_blocks=1, guidance_blocks=1,
                       residual=False, norm=False, ffn=False)


__all__ = [
    "ModelConfig",
    "ModelParameters",
    "init_params",
    "parameter_shapes",
    "per_image_prompts",
    "pool_prompts",
    "generate_prompt",
    "guide",
    "guide_and_predict",
    "save_checkpoint",
    "load_checkpoint",
    "transplant",
    "stripped_config",
]
