"""Two-branch embedding model with attention pooling, forward and backward.

Each domain (``street`` and ``aerial``) has its own patch-linear encoder and
its own pooling block. The encoder flattens non-overlapping ``patch x patch``
RGB patches, projects them to ``token_dim`` and adds a positional table; the
aerial encoder is shared across levels of detail and can add a per-LOD
vector. Tokens of all LOD images of a cell are concatenated and pooled by
multi-head attention with one learnable query, then output-projected and
L2-normalized.

Everything runs in float64 and every backward pass is derived by hand.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .contrastive import dcl_loss_and_grad

DOMAINS = ("street", "aerial")
CHECKPOINT_MAGIC = b"GCM1"


class NumericError(FloatingPointError):
    pass


class CheckpointFormatError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    token_dim: int = 64
    heads: int = 4
    embed_dim: int = 64
    n_lods: int = 4
    lod_embedding: bool = True
    street_image_size: int = 0  # 0: same as image_size

    def __post_init__(self):
        if self.street_image_size == 0:
            object.__setattr__(self, "street_image_size", self.image_size)
        for size in (self.image_size, self.street_image_size):
            if size % self.patch_size:
                raise ValueError(f"image size {size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.token_dim < 1 or self.n_lods < 1:
            raise ValueError("token_dim and n_lods must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def tokens_per_image(self, domain: str) -> int:
        size = self.street_image_size if domain == "street" else self.image_size
        return (size // self.patch_size) ** 2

    def image_size_for(self, domain: str) -> int:
        return self.street_image_size if domain == "street" else self.image_size

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                if f.type in ("bool", bool):
                    v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
                else:
                    v = int(v)
                kw[f.name] = v
        return cls(**kw)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in checkpoint order."""
    D, E = config.token_dim, config.embed_dim
    shapes = {}
    for dom in DOMAINS:
        shapes[f"{dom}.patch_w"] = (config.patch_dim, D)
        shapes[f"{dom}.patch_b"] = (D,)
        shapes[f"{dom}.pos"] = (config.tokens_per_image(dom), D)
        if dom == "aerial" and config.lod_embedding:
            shapes["aerial.lod"] = (config.n_lods, D)
        shapes[f"{dom}.query"] = (D,)
        shapes[f"{dom}.wq"] = (D, E)
        shapes[f"{dom}.wk"] = (D, E)
        shapes[f"{dom}.wv"] = (D, E)
        shapes[f"{dom}.wo"] = (E, E)
        shapes[f"{dom}.bo"] = (E,)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: ModelConfig, rng_seed: int) -> ModelParams:
    """Projections ~ U(+-1/sqrt(fan_in)), query ~ N(0, 0.02), the rest zero."""
    rng = np.random.default_rng(rng_seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        kind = name.split(".", 1)[1]
        if kind in ("patch_w", "wq", "wk", "wv", "wo"):
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, shape)
        elif kind == "query":
            tensors[name] = rng.normal(0.0, 0.02, shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(config, tensors)


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., T, patch*patch*3), patches in row-major order."""
    *lead, h, w, c = images.shape
    x = images.reshape(*lead, h // patch, patch, w // patch, patch, c)
    nd = len(lead)
    order = list(range(nd)) + [nd, nd + 2, nd + 1, nd + 3, nd + 4]
    x = x.transpose(order)
    return x.reshape(*lead, (h // patch) * (w // patch), patch * patch * c)


def _check_images(images: np.ndarray, config: ModelConfig, domain: str, lead_dims: int) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    size = config.image_size_for(domain)
    if images.ndim != lead_dims + 3 or images.shape[-3:] != (size, size, 3):
        raise ShapeError(f"{domain} images must have trailing shape ({size}, {size}, 3), got {images.shape}")
    return images


def _encode(params: ModelParams, domain: str, images: np.ndarray):
    """Token batch for street (B, H, W, 3) or aerial (B, n, H, W, 3) images."""
    cfg = params.config
    P = patchify(images, cfg.patch_size)
    X = P @ params[f"{domain}.patch_w"] + params[f"{domain}.patch_b"] + params[f"{domain}.pos"]
    if domain == "aerial":
        if cfg.lod_embedding:
            X = X + params["aerial.lod"][None, :, None, :]
        B, n, T, D = X.shape
        X = X.reshape(B, n * T, D)
    return X, P


def encode_image(params: ModelParams, domain: str, image: np.ndarray, lod_index: int = 0) -> np.ndarray:
    """Tokens (T, token_dim) of a single image."""
    cfg = params.config
    image = _check_images(image, cfg, domain, 0)
    P = patchify(image, cfg.patch_size)
    X = P @ params[f"{domain}.patch_w"] + params[f"{domain}.patch_b"] + params[f"{domain}.pos"]
    if domain == "aerial" and cfg.lod_embedding:
        X = X + params["aerial.lod"][lod_index]
    return X


# ---------------------------------------------------------------------------
# attention pooling
# ---------------------------------------------------------------------------

def _pool(params: ModelParams, domain: str, X: np.ndarray):
    """Forward over a token batch X (B, N, D); returns (embeddings, cache)."""
    cfg = params.config
    H, dh = cfg.heads, cfg.head_dim
    B, N, _ = X.shape
    qv = (params[f"{domain}.query"] @ params[f"{domain}.wq"]).reshape(H, dh)
    K = (X @ params[f"{domain}.wk"]).reshape(B, N, H, dh)
    V = (X @ params[f"{domain}.wv"]).reshape(B, N, H, dh)
    scale = 1.0 / math.sqrt(dh)
    logits = np.einsum("bnhd,hd->bhn", K, qv) * scale
    logits = logits - logits.max(axis=2, keepdims=True)
    w = np.exp(logits)
    attn = w / w.sum(axis=2, keepdims=True)
    o = np.einsum("bhn,bnhd->bhd", attn, V).reshape(B, H * dh)
    y = o @ params[f"{domain}.wo"] + params[f"{domain}.bo"]
    norm = np.linalg.norm(y, axis=1, keepdims=True)
    _check_finite(f"{domain} pooled output", y)
    if np.any(norm == 0):
        raise NumericError(f"zero-norm {domain} embedding")
    emb = y / norm
    cache = dict(X=X, qv=qv, K=K, V=V, attn=attn, o=o, norm=norm, emb=emb, scale=scale)
    return emb, cache


def mha_pool(params: ModelParams, domain: str, tokens: np.ndarray) -> np.ndarray:
    """Unit-norm embedding of one token set (N, token_dim)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ShapeError("mha_pool needs a non-empty (N, token_dim) token array")
    emb, _ = _pool(params, domain, tokens[None])
    return emb[0]


def attention_weights(params: ModelParams, domain: str, tokens: np.ndarray) -> np.ndarray:
    """Per-head attention of the learnable query over the tokens, (heads, N)."""
    _, cache = _pool(params, domain, np.asarray(tokens, dtype=np.float64)[None])
    return cache["attn"][0]


def _pool_backward(params: ModelParams, domain: str, cache: dict, d_emb: np.ndarray, grads: dict) -> np.ndarray:
    """Accumulate pooling gradients into ``grads`` and return dL/dX."""
    cfg = params.config
    H, dh = cfg.heads, cfg.head_dim
    X, K, V, attn, o = cache["X"], cache["K"], cache["V"], cache["attn"], cache["o"]
    emb, norm, scale = cache["emb"], cache["norm"], cache["scale"]
    B, N, D = X.shape

    dy = (d_emb - emb * np.sum(emb * d_emb, axis=1, keepdims=True)) / norm
    grads[f"{domain}.wo"] += o.T @ dy
    grads[f"{domain}.bo"] += dy.sum(axis=0)
    do = (dy @ params[f"{domain}.wo"].T).reshape(B, H, dh)

    d_attn = np.einsum("bhd,bnhd->bhn", do, V)
    dV = np.einsum("bhn,bhd->bnhd", attn, do)
    d_logits = attn * (d_attn - np.sum(attn * d_attn, axis=2, keepdims=True)) * scale
    dK = np.einsum("bhn,hd->bnhd", d_logits, cache["qv"])
    d_qv = np.einsum("bhn,bnhd->hd", d_logits, K).reshape(H * dh)

    X2 = X.reshape(B * N, D)
    dK2 = dK.reshape(B * N, H * dh)
    dV2 = dV.reshape(B * N, H * dh)
    grads[f"{domain}.wk"] += X2.T @ dK2
    grads[f"{domain}.wv"] += X2.T @ dV2
    grads[f"{domain}.wq"] += np.outer(params[f"{domain}.query"], d_qv)
    grads[f"{domain}.query"] += params[f"{domain}.wq"] @ d_qv
    dX = dK2 @ params[f"{domain}.wk"].T + dV2 @ params[f"{domain}.wv"].T
    return dX.reshape(B, N, D)


def _encode_backward(params: ModelParams, domain: str, P: np.ndarray, dX: np.ndarray, grads: dict) -> None:
    cfg = params.config
    D = cfg.token_dim
    if domain == "aerial":
        B, n, T, _ = P.shape
        dX = dX.reshape(B, n, T, D)
        if cfg.lod_embedding:
            grads["aerial.lod"] += dX.sum(axis=(0, 2))
        grads["aerial.pos"] += dX.sum(axis=(0, 1))
    else:
        grads[f"{domain}.pos"] += dX.sum(axis=0)
    grads[f"{domain}.patch_w"] += P.reshape(-1, cfg.patch_dim).T @ dX.reshape(-1, D)
    grads[f"{domain}.patch_b"] += dX.reshape(-1, D).sum(axis=0)


# ---------------------------------------------------------------------------
# public embedding API
# ---------------------------------------------------------------------------

def embed_streets(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Embeddings (B, embed_dim) of street images (B, H, W, 3)."""
    images = _check_images(images, params.config, "street", 1)
    X, _ = _encode(params, "street", images)
    return _pool(params, "street", X)[0]


def embed_cells(params: ModelParams, lod_images: np.ndarray) -> np.ndarray:
    """Embeddings (B, embed_dim) of cells given LOD stacks (B, n, H, W, 3)."""
    lod_images = _check_images(lod_images, params.config, "aerial", 2)
    if lod_images.shape[1] != params.config.n_lods:
        raise ShapeError(f"expected {params.config.n_lods} LOD images per cell, got {lod_images.shape[1]}")
    X, _ = _encode(params, "aerial", lod_images)
    return _pool(params, "aerial", X)[0]


def embed_street(params: ModelParams, image: np.ndarray) -> np.ndarray:
    return embed_streets(params, np.asarray(image)[None])[0]


def embed_cell(params: ModelParams, lod_images: Sequence[np.ndarray]) -> np.ndarray:
    stack = np.asarray(lod_images, dtype=np.float64)
    if stack.ndim != 4 or stack.shape[0] != params.config.n_lods:
        raise ShapeError(f"expected {params.config.n_lods} LOD images")
    return embed_cells(params, stack[None])[0]


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------

def forward_backward(params: ModelParams, street_batch: np.ndarray, cell_batch: np.ndarray,
                     loss_fn) -> tuple[float, dict, np.ndarray, np.ndarray]:
    """Generic pass: ``loss_fn(Q, R) -> (loss, dQ, dR)``.

    Returns (loss, grads, Q, R).
    """
    cfg = params.config
    street_batch = _check_images(street_batch, cfg, "street", 1)
    cell_batch = _check_images(cell_batch, cfg, "aerial", 2)
    if street_batch.shape[0] != cell_batch.shape[0]:
        raise ShapeError("street and cell batches differ in size")

    Xs, Ps = _encode(params, "street", street_batch)
    Xa, Pa = _encode(params, "aerial", cell_batch)
    _check_finite("street tokens", Xs)
    _check_finite("aerial tokens", Xa)
    Q, cache_s = _pool(params, "street", Xs)
    R, cache_a = _pool(params, "aerial", Xa)

    loss, dQ, dR = loss_fn(Q, R)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")

    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    dXs = _pool_backward(params, "street", cache_s, dQ, grads)
    dXa = _pool_backward(params, "aerial", cache_a, dR, grads)
    _encode_backward(params, "street", Ps, dXs, grads)
    _encode_backward(params, "aerial", Pa, dXa, grads)
    for k, g in grads.items():
        _check_finite(f"gradient of {k}", g)
    return loss, grads, Q, R


def loss_and_grads(params: ModelParams, street_batch: np.ndarray, cell_batch: np.ndarray,
                   mask: np.ndarray, tau: float, eps: float, *, skip_degenerate: bool = False,
                   with_similarity: bool = False):
    """Symmetric DCL over a batch and the gradient of every parameter tensor.

    Returns ``(loss, grads)``, or ``(loss, grads, S)`` with ``with_similarity``.
    """
    holder = {}

    def loss_fn(Q, R):
        S = Q @ R.T
        loss, dS = dcl_loss_and_grad(S, mask, tau, eps, skip_degenerate)
        holder["S"] = S
        return loss, dS @ R, dS.T @ Q

    loss, grads, _, _ = forward_backward(params, street_batch, cell_batch, loss_fn)
    if with_similarity:
        return loss, grads, holder["S"]
    return loss, grads


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _config_block(config: ModelConfig) -> bytes:
    lines = []
    for k, v in config.to_dict().items():
        lines.append(f"{k}={str(v).lower() if isinstance(v, bool) else v}\n")
    return "".join(lines).encode("utf-8")


def save_checkpoint(path, params: ModelParams) -> None:
    """``GCM1`` | u32 config length | config text | u32 tensor count | tensors.

    Each tensor: u32 name length, UTF-8 name, u32 rank, u64 dims, then
    little-endian float64 data in C order.
    """
    cfg = _config_block(params.config)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(params.tensors)))
        for name, arr in params.tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    try:
        return _parse_checkpoint(blob, path)
    except CheckpointFormatError:
        raise
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: malformed checkpoint ({e})") from None


def _parse_checkpoint(blob: bytes, path) -> ModelParams:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a GCM1 checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return vals

    (clen,) = take("<I")
    text = blob[pos:pos + clen].decode("utf-8")
    pos += clen
    cfg = dict(line.split("=", 1) for line in text.splitlines() if line)
    config = ModelConfig.from_dict(cfg)
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}Q")
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        tensors[name] = arr
    if pos != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    expected = param_shapes(config)
    if {k: v.shape for k, v in tensors.items()} != expected:
        raise CheckpointFormatError(f"{path}: tensors do not match the stored config")
    return ModelParams(config, tensors)
