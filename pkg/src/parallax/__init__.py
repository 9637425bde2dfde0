"""parallax: a numpy ViT stability lab (serial, parallel and stabilised-parallel
blocks) with a ViTUnet CycleGAN, Fréchet-distance evaluation and a CLI."""

from parallax.errors import ConfigError, DimensionError, ExplosionError, FormatError, NumericError, UsageError
from parallax.tensor import Tensor, backward, finite_difference_check, no_grad
from parallax.vit import RECIPES, BlockVariant, Recipe, build_classifier, count_params, get_recipe

__version__ = "0.1.0"

__all__ = [
    "BlockVariant",
    "ConfigError",
    "DimensionError",
    "ExplosionError",
    "FormatError",
    "NumericError",
    "RECIPES",
    "Recipe",
    "Tensor",
    "UsageError",
    "backward",
    "build_classifier",
    "count_params",
    "finite_difference_check",
    "get_recipe",
    "no_grad",
]
