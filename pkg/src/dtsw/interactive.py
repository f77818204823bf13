"""Interactive attention between the two decoder streams.

The reference stream builds its attention weights from the encoder feature
at the same resolution (queries and keys from ``x_sa``) and applies them to
its own values. The follower stream has no query or key weights at all: it
reuses the reference weights unchanged and only projects its own values.
"""

from __future__ import annotations

from .attention import (
    MLP,
    AttentionMap,
    AttentionProjection,
    RelativePositionBias,
    ValueProjection,
    attention_weights,
    merge_heads,
    split_heads,
)
from .module import LayerNorm, Module
from .patches import TokenGrid, WindowLayout, make_layout, window_partition, window_reverse
from .tensor import DimensionError, add, matmul

ROW_SUM_TOL = 1e-5


def interactive_attention_reference(x_sa: TokenGrid, x_g: TokenGrid, proj: AttentionProjection,
                                    bias: RelativePositionBias | None, layout: WindowLayout):
    """Queries/keys from the encoder feature, values from the decoder stream.

    Returns the head-concatenated ``A @ v(x_g)`` as a grid (before the output
    projection) and the attention map, which the follower consumes.
    """
    if x_sa.shape != x_g.shape or x_sa.batch != x_g.batch:
        raise DimensionError(f"x_SA grid {x_sa.shape} does not match decoder grid {x_g.shape}")
    wsa = window_partition(x_sa, layout)
    wg = window_partition(x_g, layout)
    q = split_heads(proj.query(wsa), proj.heads)
    k = split_heads(proj.key(wsa), proj.heads)
    v = split_heads(proj.value(wg), proj.heads)
    a = attention_weights(q, k, proj.scale, bias() if bias is not None else None, layout.mask, layout.num_windows)
    out = window_reverse(merge_heads(matmul(a, v)), layout, x_g.shape, x_g.level)
    return out, AttentionMap(a, layout)


def interactive_attention_follower(attn: AttentionMap, x_c: TokenGrid, proj_c: ValueProjection) -> TokenGrid:
    """Apply the reference stream's attention map to this stream's values."""
    layout = attn.layout
    if tuple(x_c.shape.axes) != tuple(layout.axes):
        raise DimensionError(f"attention map for grid {layout.axes} applied to {x_c.shape.axes}")
    expected = (x_c.batch * layout.num_windows, proj_c.heads, layout.window_tokens, layout.window_tokens)
    if attn.values.shape != expected:
        raise DimensionError(f"attention map {attn.values.shape}, expected {expected}")
    err = attn.max_row_error()
    if err > ROW_SUM_TOL:
        raise ValueError(f"shared attention map is not row-stochastic (max row error {err:.2e})")
    v = split_heads(proj_c.value(window_partition(x_c, layout)), proj_c.heads)
    return window_reverse(merge_heads(matmul(attn.values, v)), layout, x_c.shape, x_c.level)


class InteractiveSubBlock(Module):
    """One window layout of both decoder streams, pre-LN with residuals."""

    def __init__(self, rng, dim: int, heads: int, layout: WindowLayout, mlp_ratio: float = 4.0,
                 scale_mode: str = "per_head", role: str = ""):
        self.layout = layout
        self.ref_norm_sa = LayerNorm(dim)
        self.ref_norm1 = LayerNorm(dim)
        self.ref_attn = AttentionProjection(rng, dim, heads, f"{role}.reference", scale_mode)
        self.ref_bias = RelativePositionBias(layout.window, heads)
        self.ref_norm2 = LayerNorm(dim)
        self.ref_mlp = MLP(rng, dim, mlp_ratio)
        self.fol_norm1 = LayerNorm(dim)
        self.fol_attn = ValueProjection(rng, dim, heads, f"{role}.follower")
        self.fol_norm2 = LayerNorm(dim)
        self.fol_mlp = MLP(rng, dim, mlp_ratio)

    def reference(self, x_sa: TokenGrid, x_ref: TokenGrid):
        sa = x_sa.with_tokens(self.ref_norm_sa(x_sa.tokens))
        h = x_ref.with_tokens(self.ref_norm1(x_ref.tokens))
        y, amap = interactive_attention_reference(sa, h, self.ref_attn, self.ref_bias, self.layout)
        r = add(x_ref.tokens, self.ref_attn.out(y.tokens))
        r = add(r, self.ref_mlp(self.ref_norm2(r)))
        return x_ref.with_tokens(r), amap

    def follower(self, amap: AttentionMap, x_fol: TokenGrid) -> TokenGrid:
        h = x_fol.with_tokens(self.fol_norm1(x_fol.tokens))
        y = interactive_attention_follower(amap, h, self.fol_attn)
        f = add(x_fol.tokens, self.fol_attn.out(y.tokens))
        f = add(f, self.fol_mlp(self.fol_norm2(f)))
        return x_fol.with_tokens(f)

    def __call__(self, x_sa: TokenGrid, x_ref: TokenGrid, x_fol: TokenGrid):
        x_ref, amap = self.reference(x_sa, x_ref)
        return x_ref, self.follower(amap, x_fol), amap


class InteractiveDecoderBlock(Module):
    """Regular then shifted interactive sub-blocks; each shares its own map."""

    def __init__(self, rng, dim: int, heads: int, window, axes, mlp_ratio: float = 4.0,
                 scale_mode: str = "per_head", role: str = "decoder"):
        if heads < 1 or dim % heads:
            raise DimensionError(f"{dim} channels not divisible by {heads} heads")
        self.dim = dim
        self.axes = tuple(axes)
        self.regular = InteractiveSubBlock(rng, dim, heads, make_layout(axes, window, False), mlp_ratio,
                                           scale_mode, f"{role}.regular")
        self.shifted = InteractiveSubBlock(rng, dim, heads, make_layout(axes, window, True), mlp_ratio,
                                           scale_mode, f"{role}.shifted")

    def _check(self, *grids: TokenGrid) -> None:
        for g in grids:
            if tuple(g.shape.axes) != self.axes or g.shape.channels != self.dim:
                raise DimensionError(f"interactive block built for {self.axes}x{self.dim}, got {g.shape}")

    def reference(self, x_sa: TokenGrid, x_ref: TokenGrid):
        """Reference stream only; returns the new grid and (regular, shifted) maps."""
        self._check(x_sa, x_ref)
        x_ref, a_reg = self.regular.reference(x_sa, x_ref)
        x_ref, a_shift = self.shifted.reference(x_sa, x_ref)
        return x_ref, (a_reg, a_shift)

    def follower(self, maps, x_fol: TokenGrid) -> TokenGrid:
        """Follower stream, pairing regular with regular and shifted with shifted."""
        self._check(x_fol)
        a_reg, a_shift = maps
        x_fol = self.regular.follower(a_reg, x_fol)
        return self.shifted.follower(a_shift, x_fol)

    def __call__(self, x_sa: TokenGrid, x_ref: TokenGrid, x_fol: TokenGrid):
        x_ref, maps = self.reference(x_sa, x_ref)
        return x_ref, self.follower(maps, x_fol), maps


def interactive_decoder_block(x_sa, x_g, x_c, block: InteractiveDecoderBlock):
    """Generation-as-reference wiring: returns ``(new x_g, new x_c, maps)``."""
    return block(x_sa, x_g, x_c)
