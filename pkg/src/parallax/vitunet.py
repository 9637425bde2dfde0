"""ViTUnet generator, 70x70 PatchGAN discriminator and CycleGAN training.

ViTUnet pipeline for one resampling level::

    patch embed (+pos) -> E1 -> downsample -> E2 -> upsample -> fuse(E1) -> D1
    -> per-token linear to p*p*3 -> reshape -> residual conv tail -> tanh

Every transformer stage has ``layers // 6`` blocks of the backbone recipe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from parallax import tensor as T
from parallax.errors import DimensionError, ExplosionError, UsageError
from parallax.nn import Conv2d, Linear, Module
from parallax.stability import AdamW
from parallax.tensor import Tensor
from parallax.vit import Block, BlockVariant, PatchEmbed, Recipe, get_recipe, unpatchify


@dataclass(frozen=True)
class ViTUnetConfig:
    recipe: Recipe
    variant: BlockVariant = BlockVariant.SERIAL
    patch_size: int = 4
    image_size: int = 32
    cnn_tail_blocks: int = 3
    tail_channels: int = 32
    levels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", BlockVariant.parse(self.variant))
        if self.recipe.layers % 6:
            raise UsageError(f"backbone depth {self.recipe.layers} is not divisible by 6")
        if self.image_size % self.patch_size:
            raise DimensionError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.levels < 1 or self.grid % (2**self.levels):
            raise DimensionError(f"token grid {self.grid} cannot be halved {self.levels} time(s)")

    @property
    def stage_depth(self) -> int:
        return self.recipe.layers // 6

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @classmethod
    def from_name(cls, recipe: str, **kwargs) -> "ViTUnetConfig":
        return cls(get_recipe(recipe), **kwargs)


# ----------------------------------------------------------------------
# token resampling
# ----------------------------------------------------------------------
def _grid_of(tokens: Tensor, grid: int | None) -> int:
    n = tokens.shape[1]
    g = int(round(math.sqrt(n))) if grid is None else grid
    if g * g != n:
        raise DimensionError(f"{n} tokens do not form a {g}x{g} grid")
    return g


def token_downsample(tokens: Tensor, proj: Linear, grid: int | None = None) -> Tensor:
    """Merge each 2x2 token cell (TL, TR, BL, BR concatenated) and project 4D -> D."""
    g = _grid_of(tokens, grid)
    if g % 2:
        raise DimensionError(f"cannot downsample an odd {g}x{g} token grid")
    b, _, d = tokens.shape
    x = tokens.reshape(b, g // 2, 2, g // 2, 2, d).transpose(0, 1, 3, 2, 4, 5)
    return proj(x.reshape(b, (g // 2) ** 2, 4 * d))


def token_upsample(tokens: Tensor, proj: Linear, grid: int | None = None) -> Tensor:
    """Project each token D -> 4D and unfold it into a 2x2 cell of the doubled grid."""
    g = _grid_of(tokens, grid)
    b, _, d = tokens.shape
    x = proj(tokens).reshape(b, g, g, 2, 2, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, 4 * g * g, d)


def skip_fuse(decoder_tokens: Tensor, encoder_tokens: Tensor, proj: Linear) -> Tensor:
    """Concatenate decoder and encoder tokens channel-wise and project 2D -> D."""
    if decoder_tokens.shape != encoder_tokens.shape:
        raise DimensionError(f"skip shapes differ: {decoder_tokens.shape} vs {encoder_tokens.shape}")
    return proj(T.concat([decoder_tokens, encoder_tokens], axis=-1))


class ResidualConvBlock(Module):
    def __init__(self, channels: int, hidden: int, rng=None):
        self.conv1 = Conv2d(channels, hidden, 3, 1, 1, rng)
        self.conv2 = Conv2d(hidden, channels, 3, 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(T.activation(self.conv1(x), "relu"))


class ViTUnet(Module):
    def __init__(self, config: ViTUnetConfig, seed: int = 0, initialize: bool = True):
        rng = np.random.default_rng(seed) if initialize else None
        r = config.recipe
        d = r.hidden_dim
        self.config = config
        self.embed = PatchEmbed(config.patch_size, d, config.grid**2, rng)

        def stage():
            return [Block(d, r.mlp_size, r.heads, config.variant, rng) for _ in range(config.stage_depth)]

        self.encoder = [stage() for _ in range(config.levels + 1)]
        self.down = [Linear(4 * d, d, rng) for _ in range(config.levels)]
        self.up = [Linear(d, 4 * d, rng) for _ in range(config.levels)]
        self.fuse = [Linear(2 * d, d, rng) for _ in range(config.levels)]
        self.decoder = [stage() for _ in range(config.levels)]
        self.to_pixels = Linear(d, config.patch_size**2 * 3, rng)
        self.tail = [ResidualConvBlock(3, config.tail_channels, rng) for _ in range(config.cnn_tail_blocks)]
        # test hook: "identity" skips the output tanh
        self.output_activation = "tanh"

    # stage lists are nested, so expose them to parameter discovery explicitly
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name in ("encoder", "decoder"):
                for i, stage in enumerate(value):
                    for j, blk in enumerate(stage):
                        yield from blk.named_parameters(f"{prefix}{name}.{i}.{j}.")
        yield from super().named_parameters(prefix)

    @property
    def num_blocks(self) -> int:
        return sum(len(s) for s in self.encoder + self.decoder)

    def pixels(self, image: Tensor) -> Tensor:
        """Everything up to (not including) the CNN tail: [B,3,H,W]."""
        cfg = self.config
        if image.ndim != 4 or image.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise DimensionError(f"expected [B,3,{cfg.image_size},{cfg.image_size}], got {image.shape}")
        x = self.embed(image)
        g = cfg.grid
        skips = []
        for level in range(cfg.levels):
            for blk in self.encoder[level]:
                x = blk(x)
            skips.append((x, g))
            x = token_downsample(x, self.down[level], g)
            g //= 2
        for blk in self.encoder[cfg.levels]:
            x = blk(x)
        for level in reversed(range(cfg.levels)):
            x = token_upsample(x, self.up[level], g)
            skip, g = skips[level]
            x = skip_fuse(x, skip, self.fuse[level])
            for blk in self.decoder[level]:
                x = blk(x)
        return unpatchify(self.to_pixels(x), cfg.patch_size, cfg.grid)

    def forward(self, image: Tensor) -> Tensor:
        x = self.pixels(image)
        for blk in self.tail:
            x = blk(x)
        if self.output_activation == "identity":
            return x
        return T.activation(x, "tanh")


def vitunet_forward(image: Tensor, config: ViTUnetConfig, params: ViTUnet) -> Tensor:
    if params.config != config:
        raise UsageError("config does not match the generator parameters")
    return params(image)


# ----------------------------------------------------------------------
# PatchGAN
# ----------------------------------------------------------------------
# (in, out, stride, instance-norm) per layer; all kernels 4, padding 1
PATCHGAN_LAYERS = ((3, 64, 2, False), (64, 128, 2, True), (128, 256, 2, True), (256, 512, 1, True), (512, 1, 1, False))


def receptive_field(layers) -> int:
    """Receptive field of a stack of (kernel, stride) layers."""
    layers = list(layers)
    if not layers:
        raise UsageError("receptive_field needs at least one layer")
    rf, jump = 1, 1
    for k, s in layers:
        rf += (k - 1) * jump
        jump *= s
    return rf


class PatchGAN(Module):
    """C64-C128-C256-C512-C1 discriminator (k4, pad 1) with instance norm and LeakyReLU(0.2)."""

    def __init__(self, seed: int = 0, layers=PATCHGAN_LAYERS, initialize: bool = True):
        rng = np.random.default_rng(seed) if initialize else None
        self.norms = tuple(norm for _, _, _, norm in layers)
        self.convs = [Conv2d(c_in, c_out, 4, stride, 1, rng) for c_in, c_out, stride, _ in layers]

    def kernel_strides(self):
        return [(c.weight.shape[-1], c.stride) for c in self.convs]

    def forward(self, image: Tensor) -> Tensor:
        x = image
        last = len(self.convs) - 1
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = conv(x)
            if i == last:
                break
            if norm:
                x = T.instance_norm(x)
            x = T.activation(x, "leaky_relu", 0.2)
        return x


def patchgan_forward(image: Tensor, params: PatchGAN) -> Tensor:
    return params(image)


# ----------------------------------------------------------------------
# CycleGAN
# ----------------------------------------------------------------------
class ImagePool:
    """History buffer of generated images shown to the discriminators."""

    def __init__(self, capacity: int = 50, seed=0):
        self.capacity = capacity
        self.images: list[np.ndarray] = []
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def __len__(self):
        return len(self.images)

    def query_one(self, fresh: np.ndarray) -> np.ndarray:
        fresh = np.array(fresh, copy=True)
        if self.capacity <= 0:
            return fresh
        if len(self.images) < self.capacity:
            self.images.append(fresh)
            return fresh
        if self.rng.random() > 0.5:
            idx = int(self.rng.integers(0, self.capacity))
            old = self.images[idx]
            self.images[idx] = fresh
            return old
        return fresh

    def query(self, batch: np.ndarray) -> np.ndarray:
        return np.stack([self.query_one(img) for img in batch])


def image_pool_query(pool: ImagePool, fresh_fake: np.ndarray) -> np.ndarray:
    return pool.query_one(fresh_fake)


@dataclass
class GanLossWeights:
    cycle: float = 10.0
    identity: float = 5.0
    adversarial: str = "least_squares"

    def __post_init__(self):
        if self.cycle < 0 or self.identity < 0:
            raise UsageError("loss weights must be >= 0")
        if self.adversarial != "least_squares":
            raise UsageError(f"unsupported adversarial mode {self.adversarial!r}")


def lsgan_loss(scores: Tensor, target: float) -> Tensor:
    return ((scores - target) ** 2).mean()


def l1_loss(a: Tensor, b) -> Tensor:
    return (a - b).abs().mean()


@dataclass
class GanLosses:
    g_adv_ab: float
    g_adv_ba: float
    cycle: float
    identity: float
    d_a: float
    d_b: float
    cycle_l1: float = field(default=0.0)

    @property
    def generator(self) -> float:
        return self.g_adv_ab + self.g_adv_ba + self.cycle + self.identity

    def as_dict(self) -> dict:
        return {
            "g_adv_ab": self.g_adv_ab,
            "g_adv_ba": self.g_adv_ba,
            "cycle": self.cycle,
            "identity": self.identity,
            "d_a": self.d_a,
            "d_b": self.d_b,
        }


def generator_objective(g_ab, g_ba, d_a, d_b, a: Tensor, b: Tensor, weights: GanLossWeights):
    """Generator loss and its parts: LSGAN (target 1) + weighted cycle and identity L1."""
    fake_b = g_ab(a)
    fake_a = g_ba(b)
    adv_ab = lsgan_loss(d_b(fake_b), 1.0)
    adv_ba = lsgan_loss(d_a(fake_a), 1.0)
    cycle_l1 = l1_loss(g_ba(fake_b), a) + l1_loss(g_ab(fake_a), b)
    total = adv_ab + adv_ba + cycle_l1 * weights.cycle
    identity = 0.0
    if weights.identity > 0:
        idt = l1_loss(g_ab(b), b) + l1_loss(g_ba(a), a)
        total = total + idt * weights.identity
        identity = idt.item() * weights.identity
    parts = dict(g_adv_ab=adv_ab.item(), g_adv_ba=adv_ba.item(), cycle=cycle_l1.item() * weights.cycle,
                 identity=identity, cycle_l1=cycle_l1.item())
    return total, fake_a, fake_b, parts


def discriminator_objective(d: Module, real: Tensor, fake: Tensor) -> Tensor:
    return (lsgan_loss(d(real), 1.0) + lsgan_loss(d(fake), 0.0)) * 0.5


class CycleGAN:
    """Two generators, two PatchGANs, image pools and Adam(0.5, 0.999) optimisers."""

    def __init__(self, g_ab, g_ba, d_a, d_b, weights: GanLossWeights | None = None, lr: float = 2e-4,
                 betas=(0.5, 0.999), pool_size: int = 50, seed: int = 0):
        self.g_ab, self.g_ba, self.d_a, self.d_b = g_ab, g_ba, d_a, d_b
        self.weights = weights or GanLossWeights()
        self.opt_g = AdamW(g_ab.parameters() + g_ba.parameters(), lr, 0.0, betas)
        self.opt_d = AdamW(d_a.parameters() + d_b.parameters(), lr, 0.0, betas)
        seq = np.random.SeedSequence(seed).spawn(2)
        self.pool_a = ImagePool(pool_size, np.random.default_rng(seq[0]))
        self.pool_b = ImagePool(pool_size, np.random.default_rng(seq[1]))
        self.steps = 0

    def modules(self):
        return {"g_ab": self.g_ab, "g_ba": self.g_ba, "d_a": self.d_a, "d_b": self.d_b}

    def step(self, batch_a, batch_b) -> GanLosses:
        a = Tensor(np.asarray(batch_a, dtype=np.float32))
        b = Tensor(np.asarray(batch_b, dtype=np.float32))
        for m in self.modules().values():
            m.zero_grad()
        total, fake_a, fake_b, parts = generator_objective(self.g_ab, self.g_ba, self.d_a, self.d_b, a, b, self.weights)
        self._check("generator", total.item(), parts)
        T.backward(total)
        self.opt_g.step()

        self.d_a.zero_grad()
        self.d_b.zero_grad()
        pooled_b = Tensor(self.pool_b.query(fake_b.data))
        pooled_a = Tensor(self.pool_a.query(fake_a.data))
        loss_db = discriminator_objective(self.d_b, b, pooled_b)
        loss_da = discriminator_objective(self.d_a, a, pooled_a)
        parts.update(d_a=loss_da.item(), d_b=loss_db.item())
        self._check("discriminator", parts["d_a"] + parts["d_b"], parts)
        T.backward(loss_da + loss_db)
        self.opt_d.step()
        self.steps += 1
        return GanLosses(**parts)

    @staticmethod
    def _check(phase: str, value: float, parts: dict) -> None:
        if not math.isfinite(value) or not all(math.isfinite(v) for v in parts.values()):
            raise ExplosionError(f"non-finite {phase} loss: {parts}", stats=dict(parts))

    def translate(self, images, direction: str = "ab", batch_size: int = 32) -> np.ndarray:
        g = self.g_ab if direction == "ab" else self.g_ba
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(g(Tensor(images[i : i + batch_size])).data)
        return np.concatenate(out)

    def cycle_l1(self, images_a, images_b, batch_size: int = 32) -> float:
        """Mean of the two cycle reconstruction L1 errors, without gradients."""
        rec_a = self.translate(self.translate(images_a, "ab", batch_size), "ba", batch_size)
        rec_b = self.translate(self.translate(images_b, "ba", batch_size), "ab", batch_size)
        return 0.5 * float(np.abs(rec_a - images_a).mean() + np.abs(rec_b - images_b).mean())


def cyclegan_step(gan: CycleGAN, batch_a, batch_b) -> GanLosses:
    return gan.step(batch_a, batch_b)


def build_cyclegan(config: ViTUnetConfig, weights: GanLossWeights | None = None, seed: int = 0, lr: float = 2e-4,
                   betas=(0.5, 0.999), pool_size: int = 50) -> CycleGAN:
    seeds = np.random.SeedSequence(seed).generate_state(5)
    return CycleGAN(
        ViTUnet(config, int(seeds[0])),
        ViTUnet(config, int(seeds[1])),
        PatchGAN(int(seeds[2])),
        PatchGAN(int(seeds[3])),
        weights,
        lr,
        betas,
        pool_size,
        int(seeds[4]),
    )
