"""Vision-transformer building blocks: serial, parallel and stabilised parallel.

The three residual wirings share one parameter layout so that the variants can
be compared under identical recipes:

* ``serial``:  ``x += Attn(LN(x)); x += MLP(LN(x))``
* ``parallel_raw``:  ``y = LN(x); x + MLP(y) + Attn(y)``
* ``parallel_stabilized``:  ``y = LN(x); x + LN(MLP(y)) + Attn(y)``

Parallel variants always normalise queries and keys per head and carry no
Q/K/V biases.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from parallax import tensor as T
from parallax.errors import DimensionError, UsageError
from parallax.nn import LayerNorm, Linear, Module, parameter, trunc_normal
from parallax.tensor import Tensor


class BlockVariant(str, enum.Enum):
    SERIAL = "serial"
    PARALLEL_RAW = "parallel_raw"
    PARALLEL_STABILIZED = "parallel_stabilized"

    @property
    def parallel(self) -> bool:
        return self is not BlockVariant.SERIAL

    @property
    def qk_norm(self) -> bool:
        return self.parallel

    @classmethod
    def parse(cls, value) -> "BlockVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise UsageError(f"unknown block variant {value!r} (choose from {choices})") from None


@dataclass(frozen=True)
class Recipe:
    name: str
    layers: int
    hidden_dim: int
    mlp_size: int
    heads: int
    patch_size: int = 16
    image_size: int = 224
    num_classes: int = 1000

    def __post_init__(self):
        if min(self.layers, self.hidden_dim, self.mlp_size, self.heads, self.patch_size, self.image_size) <= 0:
            raise UsageError(f"recipe {self.name}: sizes must be positive")
        if self.hidden_dim % self.heads:
            raise DimensionError(f"recipe {self.name}: hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise DimensionError(f"recipe {self.name}: image_size {self.image_size} not divisible by patch {self.patch_size}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def at(self, image_size=None, patch_size=None, num_classes=None) -> "Recipe":
        """Same widths/depth at a different input geometry or class count."""
        return replace(
            self,
            image_size=self.image_size if image_size is None else image_size,
            patch_size=self.patch_size if patch_size is None else patch_size,
            num_classes=self.num_classes if num_classes is None else num_classes,
        )


RECIPES = {
    "Ti/16": Recipe("Ti/16", 12, 192, 768, 3),
    "S/16": Recipe("S/16", 12, 384, 1536, 6),
    "B/16": Recipe("B/16", 12, 768, 3072, 12),
    "L/16": Recipe("L/16", 24, 1024, 4096, 16),
    "H/16": Recipe("H/16", 32, 1280, 5120, 16),
    "22B/16": Recipe("22B/16", 48, 6144, 24576, 48),
}

# Reported parameter counts (224 px, patch 16); ``None`` where no model was reported.
TABLE_PARAMS = {
    "Ti/16": {"vit": 5.8e6, "vit22b": 5.6e6},
    "S/16": {"vit": 22.2e6, "vit22b": 22.1e6},
    "B/16": {"vit": 86e6, "vit22b": 87.9e6},
    "L/16": {"vit": 307e6, "vit22b": 307e6},
    "H/16": {"vit": 632e6, "vit22b": None},
    "22B/16": {"vit": None, "vit22b": 21743e6},
}

for _r in RECIPES.values():
    assert _r.mlp_size == 4 * _r.hidden_dim, _r.name


def get_recipe(name: str) -> Recipe:
    try:
        return RECIPES[name]
    except KeyError:
        raise UsageError(f"unknown recipe {name!r} (choose from {', '.join(RECIPES)})") from None


# ----------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------
def patchify(image: Tensor, p: int) -> Tensor:
    """[B,C,H,W] -> [B, N, p*p*C]; each patch flattened row-major as (p, p, C)."""
    b, c, h, w = image.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = image.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, p * p * c)


def unpatchify(tokens: Tensor, p: int, grid: int, channels: int = 3) -> Tensor:
    """Inverse of :func:`patchify` for a square grid."""
    b = tokens.shape[0]
    x = tokens.reshape(b, grid, grid, p, p, channels).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, grid * p, grid * p)


def patch_embed(image: Tensor, proj: Linear, pos_embed: Tensor, p: int) -> Tensor:
    """Flatten p x p patches, project to the hidden width and add positions."""
    tokens = proj(patchify(image, p))
    if pos_embed.shape != tokens.shape[1:]:
        raise DimensionError(f"pos_embed {pos_embed.shape} does not match tokens {tokens.shape[1:]}")
    return tokens + pos_embed


class PatchEmbed(Module):
    def __init__(self, patch_size: int, dim: int, num_patches: int, rng=None, channels: int = 3):
        self.patch_size = patch_size
        self.proj = Linear(patch_size * patch_size * channels, dim, rng)
        shape = (num_patches, dim)
        self.pos_embed = parameter(np.zeros(shape) if rng is None else trunc_normal(rng, shape))

    def forward(self, image: Tensor) -> Tensor:
        return patch_embed(image, self.proj, self.pos_embed, self.patch_size)


class Attention(Module):
    """Multi-head self-attention with optional per-head query/key LayerNorm."""

    def __init__(self, dim: int, heads: int, qk_norm: bool, rng=None):
        if dim % heads:
            raise DimensionError(f"hidden dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qk_norm = qk_norm
        bias = not qk_norm
        self.q = Linear(dim, dim, rng, bias=bias)
        self.k = Linear(dim, dim, rng, bias=bias)
        self.v = Linear(dim, dim, rng, bias=bias)
        self.out = Linear(dim, dim, rng)
        hd = dim // heads
        if qk_norm:
            self.q_gain = parameter(np.ones((heads, 1, hd)))
            self.k_gain = parameter(np.ones((heads, 1, hd)))

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def logits(self, x: Tensor):
        """Pre-softmax attention logits [B,h,N,N] and the per-head values."""
        if x.shape[-1] % self.heads:
            raise DimensionError(f"token width {x.shape[-1]} not divisible by {self.heads} heads")
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        if self.qk_norm:
            q = T.layer_norm(q, self.q_gain)
            k = T.layer_norm(k, self.k_gain)
        scale = 1.0 / math.sqrt(q.shape[-1])
        return T.matmul(q, T.swapaxes(k, -1, -2)) * scale, v

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        logits, v = self.logits(x)
        ctx = T.matmul(T.softmax(logits), v)
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(b, n, d))


def attention(tokens: Tensor, params: Attention, heads: int | None = None, qk_norm: bool | None = None) -> Tensor:
    if heads is not None and heads != params.heads:
        raise UsageError("heads does not match the attention parameters")
    if qk_norm is not None and qk_norm != params.qk_norm:
        raise UsageError("qk_norm does not match the attention parameters")
    return params(tokens)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng=None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.activation(self.fc1(x), "gelu"))


class Block(Module):
    def __init__(self, dim: int, mlp_size: int, heads: int, variant, rng=None):
        self.variant = BlockVariant.parse(variant)
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, self.variant.qk_norm, rng)
        if self.variant is BlockVariant.SERIAL:
            self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_size, rng)
        if self.variant is BlockVariant.PARALLEL_STABILIZED:
            self.mlp_norm = LayerNorm(dim)
        # test hook: bypass the stabiliser LayerNorm
        self.stabilizer_identity = False

    def forward(self, x: Tensor) -> Tensor:
        if self.variant is BlockVariant.SERIAL:
            x = x + self.attn(self.norm1(x))
            return x + self.mlp(self.norm2(x))
        y = self.norm1(x)
        m = self.mlp(y)
        if self.variant is BlockVariant.PARALLEL_STABILIZED and not self.stabilizer_identity:
            m = self.mlp_norm(m)
        return x + m + self.attn(y)


def block_forward(x: Tensor, params: Block, variant=None) -> Tensor:
    if variant is not None and BlockVariant.parse(variant) is not params.variant:
        raise UsageError("variant does not match the block parameters")
    if x.ndim != 3 or x.shape[-1] != params.norm1.gain.shape[0]:
        raise DimensionError(f"block input {x.shape} does not match hidden dim {params.norm1.gain.shape[0]}")
    return params(x)


class ViTClassifier(Module):
    """Patch embedding, class token, ``layers`` blocks, final LayerNorm and a linear head."""

    def __init__(self, recipe: Recipe, variant, rng=None):
        self.recipe = recipe
        self.variant = BlockVariant.parse(variant)
        d = recipe.hidden_dim
        self.embed = PatchEmbed(recipe.patch_size, d, recipe.num_patches, rng)
        self.cls_token = parameter(np.zeros((1, 1, d)) if rng is None else trunc_normal(rng, (1, 1, d)))
        self.blocks = [Block(d, recipe.mlp_size, recipe.heads, self.variant, rng) for _ in range(recipe.layers)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, recipe.num_classes, rng)

    def features(self, images: Tensor) -> Tensor:
        x = self.embed(images)
        b = x.shape[0]
        cls = T.broadcast_to(self.cls_token, (b, 1, x.shape[-1]))
        x = T.concat([cls, x], axis=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, 0]

    def forward(self, images: Tensor) -> Tensor:
        return self.head(self.features(images))


def build_classifier(recipe: Recipe, variant, seed: int = 0, initialize: bool = True) -> ViTClassifier:
    """Instantiate a classifier; weights ~ truncated normal(0.02), biases 0, norm gains 1.

    ``initialize=False`` allocates zeros instead (for structural inspection of large recipes).
    """
    rng = np.random.default_rng(seed) if initialize else None
    return ViTClassifier(recipe, variant, rng)


def count_block_params(dim: int, mlp_size: int, heads: int, variant) -> int:
    variant = BlockVariant.parse(variant)
    attn_proj = 4 * dim * dim + dim  # q, k, v, out weights + out bias
    mlp = 2 * dim * mlp_size + mlp_size + dim
    norms = 2 * dim  # pre-norm
    if variant is BlockVariant.SERIAL:
        attn_proj += 3 * dim  # q, k, v biases
        norms += 2 * dim
    else:
        attn_proj += 2 * dim  # per-head query/key gains
        if variant is BlockVariant.PARALLEL_STABILIZED:
            norms += 2 * dim
    return attn_proj + mlp + norms


def count_params(recipe: Recipe, variant, image_size: int | None = None, patch_size: int | None = None,
                 num_classes: int | None = None) -> int:
    """Closed-form count of learnable scalars of :func:`build_classifier`'s model."""
    r = recipe.at(image_size, patch_size, num_classes)
    d = r.hidden_dim
    embed = r.patch_size * r.patch_size * 3 * d + d + r.num_patches * d
    head = 2 * d + d * r.num_classes + r.num_classes
    return embed + d + r.layers * count_block_params(d, r.mlp_size, r.heads, variant) + head
