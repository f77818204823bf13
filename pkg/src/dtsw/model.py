"""The dual-task network: shared windowed-transformer encoder, a generation
decoder and a classification decoder coupled by interactive attention, task
heads, a patch discriminator, and the task losses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from math import prod

import numpy as np

from .attention import SwinBlock
from .interactive import InteractiveDecoderBlock
from .module import LayerNorm, Linear, Module, PatchEmbed, param, trunc_normal
from .patches import (
    GridShape,
    TokenGrid,
    expand_channels,
    merge_channels,
    patch_expand,
    patch_merge,
    patch_partition,
    patch_reassemble,
)
from .tensor import (
    DimensionError,
    Tensor,
    add,
    cross_entropy,
    l1_loss,
    mean,
    mul,
    reshape,
    softmax,
    softplus,
)

TASKS = ("gen", "cls")


def _tuple(v, kind=int):
    return tuple(kind(x) for x in v)


@dataclass
class ModelConfig:
    input_extents: tuple = (64, 64)
    patch: tuple = (4, 4)
    window: tuple = (4, 4)
    stages: int = 3
    channels: int = 24
    heads: tuple = (3, 6, 12)
    merge_factors: tuple = ((2, 2), (2, 2), (2, 2))
    mlp_ratio: float = 4.0
    num_classes: int = 2
    adv_weight: float = 0.1
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    interactive: bool = True
    reference_task: str = "gen"
    scale_mode: str = "per_head"
    disc_patch: tuple = (8, 8)
    disc_channels: int = 32
    disc_heads: int = 2
    init_seed: int = 0

    def __post_init__(self):
        self.input_extents = _tuple(self.input_extents)
        self.patch = _tuple(self.patch)
        self.window = _tuple(self.window)
        self.heads = _tuple(self.heads)
        self.disc_patch = _tuple(self.disc_patch)
        self.merge_factors = tuple(_tuple(f) for f in self.merge_factors)

    @property
    def ndim(self) -> int:
        return len(self.input_extents)

    def level_shapes(self) -> list[GridShape]:
        """GridShape at every encoder level, bottleneck last."""
        axes = tuple(e // p for e, p in zip(self.input_extents, self.patch))
        shapes = [GridShape(axes, self.channels)]
        for f in self.merge_factors:
            axes = tuple(a // x for a, x in zip(axes, f))
            shapes.append(GridShape(axes, shapes[-1].channels * 2))
        return shapes

    def validate(self) -> None:
        nd = self.ndim
        for name in ("patch", "window", "disc_patch"):
            if len(getattr(self, name)) != nd:
                raise DimensionError(f"{name} {getattr(self, name)} has wrong rank for {nd}-D input")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.stages < 1 or len(self.heads) != self.stages or len(self.merge_factors) != self.stages:
            raise ValueError(f"need {self.stages} head counts and merge factors")
        if self.reference_task not in TASKS:
            raise ValueError(f"reference_task must be one of {TASKS}")
        if self.scale_mode not in ("per_head", "full_c"):
            raise ValueError("scale_mode must be per_head or full_c")
        for e, p in zip(self.input_extents, self.patch):
            if e % p:
                raise DimensionError(f"input {self.input_extents} not divisible by patch {self.patch}")
        for e, p in zip(self.input_extents, self.disc_patch):
            if e % p:
                raise DimensionError(f"input {self.input_extents} not divisible by disc patch {self.disc_patch}")
        axes = tuple(e // p for e, p in zip(self.input_extents, self.patch))
        c = self.channels
        for level, (f, h) in enumerate(zip(self.merge_factors, self.heads)):
            if len(f) != nd:
                raise DimensionError(f"merge factors {f} have wrong rank")
            if any(a % x for a, x in zip(axes, f)):
                raise DimensionError(f"level {level} grid {axes} not divisible by merge factors {f}")
            if c % h:
                raise DimensionError(f"level {level}: {c} channels not divisible by {h} heads")
            c_cat, c_red = merge_channels(c, f)
            assert c_cat == c * prod(f) and c_red == 2 * c
            if prod(f) == 4:
                c_mid, c_back = expand_channels(c_red, f)
                assert c_mid == 2 * c_red and c_back == c
            axes = tuple(a // x for a, x in zip(axes, f))
            c = c_red
        if self.disc_channels % self.disc_heads:
            raise DimensionError("disc_channels not divisible by disc_heads")

    # canonical text: one sorted key=value line per field
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={_fmt(getattr(self, f.name))}")
        return "\n".join(sorted(lines)) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if line:
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        return cls.from_kv(kv)

    @classmethod
    def from_kv(cls, kv: dict, base: "ModelConfig | None" = None) -> "ModelConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        types = {f.name: f.default for f in dataclasses.fields(cls)}
        for k, v in kv.items():
            if k not in types:
                raise KeyError(f"unknown model config key {k!r}")
            setattr(cfg, k, _parse(k, v, types[k]))
        cfg.__post_init__()
        return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join("x".join(str(a) for a in f) for f in v)
        return ",".join(str(a) for a in v)
    return str(v)


def _parse(key: str, v: str, default):
    if not isinstance(v, str):
        return v
    if isinstance(default, bool):
        if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {v!r}")
        return v.lower() in ("true", "1", "yes")
    if key == "merge_factors":
        return tuple(tuple(int(a) for a in f.split("x")) for f in v.split(","))
    if isinstance(default, tuple):
        return tuple(int(a) for a in v.split(","))
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    return v


def desk_2d(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides)


def desk_3d(**overrides) -> ModelConfig:
    cfg = ModelConfig(
        input_extents=(32, 32, 32),
        patch=(4, 4, 4),
        window=(4, 4, 4),
        merge_factors=((1, 2, 2),) * 3,
        disc_patch=(8, 8, 8),
    )
    return dataclasses.replace(cfg, **overrides)


def tiny_2d(**overrides) -> ModelConfig:
    """A few-thousand-parameter variant for exhaustive gradient checks."""
    cfg = ModelConfig(
        input_extents=(16, 16),
        patch=(4, 4),
        window=(2, 2),
        stages=2,
        channels=4,
        heads=(1, 2),
        merge_factors=((2, 2), (2, 2)),
        mlp_ratio=1.0,
        disc_patch=(8, 8),
        disc_channels=4,
        disc_heads=1,
    )
    return dataclasses.replace(cfg, **overrides)


# ---------------------------------------------------------------- components


@dataclass
class EncoderFeatures:
    """Transformer-block output at each resolution, then the bottleneck."""

    levels: list

    @property
    def bottleneck(self) -> TokenGrid:
        return self.levels[-1]


@dataclass
class ModelOutput:
    pred_scan: Tensor
    probs: Tensor
    features: EncoderFeatures
    gen_grid: TokenGrid
    cls_grid: TokenGrid
    shared_maps: dict = field(default_factory=dict)


class Merge(Module):
    """patch_merge followed by a LayerNorm on the reduced tokens."""

    def __init__(self, rng, c: int, factors):
        c_cat, c_out = merge_channels(c, factors)
        self.factors = tuple(factors)
        self.w = param(trunc_normal(rng, (c_cat, c_out)))
        self.norm = LayerNorm(c_out)

    def __call__(self, grid: TokenGrid) -> TokenGrid:
        out = patch_merge(grid, self.factors, self.w)
        return out.with_tokens(self.norm(out.tokens))


class Expand(Module):
    """patch_expand followed by a LayerNorm on the finer tokens."""

    def __init__(self, rng, c_in: int, c_out: int, factors):
        self.factors = tuple(factors)
        self.w = param(trunc_normal(rng, (c_in, c_out * prod(factors))))
        self.norm = LayerNorm(c_out)

    def __call__(self, grid: TokenGrid) -> TokenGrid:
        out = patch_expand(grid, self.factors, self.w)
        return out.with_tokens(self.norm(out.tokens))


class Discriminator(Module):
    """Patch tokens -> one windowed transformer block -> mean pool -> logit."""

    def __init__(self, rng, cfg: ModelConfig):
        self.patch = cfg.disc_patch
        axes = tuple(e // p for e, p in zip(cfg.input_extents, cfg.disc_patch))
        self.embed = PatchEmbed(rng, prod(cfg.disc_patch), cfg.disc_channels)
        self.embed_norm = LayerNorm(cfg.disc_channels)
        self.block = SwinBlock(rng, cfg.disc_channels, cfg.disc_heads, cfg.window, axes, cfg.mlp_ratio,
                               cfg.scale_mode, "disc")
        self.norm = LayerNorm(cfg.disc_channels)
        self.fc = Linear(rng, cfg.disc_channels, 1)

    def __call__(self, scan) -> Tensor:
        grid = patch_partition(scan, self.patch)
        grid = TokenGrid(GridShape(grid.shape.axes, self.embed.w.shape[1]), self.embed_norm(self.embed(grid.tokens)))
        grid, _, _ = self.block(grid)
        pooled = mean(self.norm(grid.tokens), axis=1)
        return reshape(self.fc(pooled), (pooled.shape[0],))


class DualTaskModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed) if rng is None else rng
        shapes = cfg.level_shapes()
        self._shapes = shapes
        self.embed = PatchEmbed(rng, prod(cfg.patch), cfg.channels)
        self.embed_norm = LayerNorm(cfg.channels)
        self.enc_blocks = [
            SwinBlock(rng, s.channels, h, cfg.window, s.axes, cfg.mlp_ratio, cfg.scale_mode, f"encoder.{i}")
            for i, (s, h) in enumerate(zip(shapes, cfg.heads))
        ]
        self.merges = [Merge(rng, s.channels, f) for s, f in zip(shapes, cfg.merge_factors)]
        self.gen_expands = [
            Expand(rng, shapes[i + 1].channels, shapes[i].channels, cfg.merge_factors[i]) for i in range(cfg.stages)
        ]
        self.cls_expands = [
            Expand(rng, shapes[i + 1].channels, shapes[i].channels, cfg.merge_factors[i]) for i in range(cfg.stages)
        ]
        if cfg.interactive:
            self.dec_blocks = [
                InteractiveDecoderBlock(rng, s.channels, h, cfg.window, s.axes, cfg.mlp_ratio, cfg.scale_mode,
                                        f"decoder.{i}")
                for i, (s, h) in enumerate(zip(shapes, cfg.heads))
            ]
        else:
            self.gen_blocks = [
                SwinBlock(rng, s.channels, h, cfg.window, s.axes, cfg.mlp_ratio, cfg.scale_mode, f"gen.{i}")
                for i, (s, h) in enumerate(zip(shapes, cfg.heads))
            ]
            self.cls_blocks = [
                SwinBlock(rng, s.channels, h, cfg.window, s.axes, cfg.mlp_ratio, cfg.scale_mode, f"cls.{i}")
                for i, (s, h) in enumerate(zip(shapes, cfg.heads))
            ]
        self.gen_norm = LayerNorm(cfg.channels)
        self.gen_head = PatchEmbed(rng, cfg.channels, prod(cfg.patch))
        # fan-in init: at std 0.02 the head starts near zero, the shared layer
        # sees almost no classification gradient and the logits stay at chance
        self.cls_head = Linear(rng, cfg.channels, cfg.num_classes, fan_in=True)

    @property
    def shared_layer(self) -> Tensor:
        """Last layer shared by both tasks (bottleneck merge weights)."""
        return self.merges[-1].w

    # ------------------------------------------------------------ encoder

    def encode(self, scan) -> EncoderFeatures:
        cfg = self.cfg
        if tuple(scan.shape[1:]) != cfg.input_extents:
            raise DimensionError(f"scan extents {tuple(scan.shape[1:])} != configured {cfg.input_extents}")
        grid = patch_partition(scan, cfg.patch)
        e = self.embed(grid.tokens)
        grid = TokenGrid(self._shapes[0], self.embed_norm(e), 0)
        levels = []
        for block, merge in zip(self.enc_blocks, self.merges):
            grid, _, _ = block(grid)
            levels.append(grid)
            grid = merge(grid)
        levels.append(grid)
        return EncoderFeatures(levels)

    # ------------------------------------------------------------ decoders

    def _expands(self, task: str):
        return self.gen_expands if task == "gen" else self.cls_expands

    def decode_reference(self, feats: EncoderFeatures):
        """Run the reference stream; returns its level-0 grid and per-level maps."""
        task = self.cfg.reference_task
        x = feats.bottleneck
        maps: dict[int, tuple] = {}
        for level in reversed(range(self.cfg.stages)):
            x = self._expands(task)[level](x)
            x, pair = self.dec_blocks[level].reference(feats.levels[level], x)
            maps[level] = pair
        return x, maps

    def decode_follower(self, feats: EncoderFeatures, maps: dict):
        task = "cls" if self.cfg.reference_task == "gen" else "gen"
        x = feats.bottleneck
        for level in reversed(range(self.cfg.stages)):
            if level not in maps:
                raise KeyError(f"no shared attention map for decoder level {level}")
            x = self._expands(task)[level](x)
            x = self.dec_blocks[level].follower(maps[level], x)
        return x

    def _decode_plain(self, feats: EncoderFeatures, task: str) -> TokenGrid:
        blocks = self.gen_blocks if task == "gen" else self.cls_blocks
        x = feats.bottleneck
        for level in reversed(range(self.cfg.stages)):
            x = self._expands(task)[level](x)
            x, _, _ = blocks[level](x)
        return x

    def decode(self, feats: EncoderFeatures):
        """Both decoders; returns (gen grid, cls grid, shared maps by level)."""
        if not self.cfg.interactive:
            return self._decode_plain(feats, "gen"), self._decode_plain(feats, "cls"), {}
        ref, maps = self.decode_reference(feats)
        fol = self.decode_follower(feats, maps)
        if self.cfg.reference_task == "gen":
            return ref, fol, maps
        return fol, ref, maps

    # ------------------------------------------------------------ heads

    def generation_head(self, grid: TokenGrid) -> Tensor:
        tokens = self.gen_head(self.gen_norm(grid.tokens))
        return patch_reassemble(TokenGrid(GridShape(grid.shape.axes, tokens.shape[-1]), tokens), self.cfg.patch)

    def classification_head(self, grid: TokenGrid) -> Tensor:
        return softmax(self.cls_head(mean(grid.tokens, axis=1)), axis=-1)

    def __call__(self, scan) -> ModelOutput:
        feats = self.encode(scan)
        g, c, maps = self.decode(feats)
        return ModelOutput(self.generation_head(g), self.classification_head(c), feats, g, c, maps)

    # ------------------------------------------------------------ misc

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.data.shape:
                raise DimensionError(f"parameter {k}: stored {arrays[k].shape}, model {p.data.shape}")
            p.data = np.array(arrays[k], dtype=p.data.dtype)


def encode(model: DualTaskModel, scan) -> EncoderFeatures:
    return model.encode(scan)


def decode_generation(model: DualTaskModel, feats: EncoderFeatures):
    """Generation decoder. As the reference stream it also returns the maps it shares."""
    if model.cfg.interactive and model.cfg.reference_task == "gen":
        return model.decode_reference(feats)
    if not model.cfg.interactive:
        return model._decode_plain(feats, "gen"), {}
    raise RuntimeError("generation decoder is the follower; use decode_follower with the reference maps")


def decode_classification(model: DualTaskModel, feats: EncoderFeatures, maps: dict | None = None):
    if not model.cfg.interactive:
        return model._decode_plain(feats, "cls")
    if model.cfg.reference_task == "gen":
        if maps is None:
            raise KeyError("classification decoder needs the generation decoder's attention maps")
        return model.decode_follower(feats, maps)
    return model.decode_reference(feats)[0]


# ---------------------------------------------------------------- losses


@dataclass
class TaskWeights:
    w_gen: float = 1.0
    w_cls: float = 1.0
    initial_gen: float | None = None
    initial_cls: float | None = None


@dataclass
class Losses:
    total: Tensor
    gen: Tensor
    cls: Tensor
    adv: Tensor | None
    l1: Tensor


def adversarial_loss(disc: Discriminator, fake) -> Tensor:
    """Non-saturating generator loss: mean softplus(-D(fake))."""
    return mean(softplus(mul(disc(fake), -1.0)))


def discriminator_loss(disc: Discriminator, real, fake) -> Tensor:
    return add(mean(softplus(mul(disc(real), -1.0))), mean(softplus(disc(fake))))


def compute_losses(pred_scan: Tensor, true_scan, pred_probs: Tensor, true_label, disc: Discriminator | None,
                   weights: TaskWeights, adv_weight: float = 0.1) -> Losses:
    l1 = l1_loss(pred_scan, true_scan)
    adv = None
    gen = l1
    if adv_weight > 0 and disc is not None:
        adv = adversarial_loss(disc, pred_scan)
        gen = add(l1, mul(adv, adv_weight))
    cls = cross_entropy(pred_probs, true_label)
    total = add(mul(gen, weights.w_gen), mul(cls, weights.w_cls))
    return Losses(total, gen, cls, adv, l1)

