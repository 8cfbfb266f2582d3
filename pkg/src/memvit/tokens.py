"""Tokens with an explicit spatiotemporal factorization."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .autodiff import DimensionError, Tensor, reshape


@dataclass
class TokenTensor:
    """[N, d] tokens laid out row-major over a (t, h, w) grid."""

    data: Tensor
    t_extent: int
    h_extent: int
    w_extent: int
    clip_index: int = 0
    video_id: int = 0

    def __post_init__(self):
        n = self.t_extent * self.h_extent * self.w_extent
        if self.data.shape != (n, self.data.shape[-1]):
            raise DimensionError(
                f"token data shape {self.data.shape} does not match extents "
                f"{(self.t_extent, self.h_extent, self.w_extent)}"
            )

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.t_extent, self.h_extent, self.w_extent)

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def grid(self) -> Tensor:
        return reshape(self.data, (self.t_extent, self.h_extent, self.w_extent, self.channels))

    def with_data(self, data: Tensor, extents: tuple[int, int, int] | None = None) -> "TokenTensor":
        if extents is None:
            return replace(self, data=data)
        t, h, w = extents
        return replace(self, data=data, t_extent=t, h_extent=h, w_extent=w)

    def position(self, row: int) -> tuple[int, int, int]:
        """Row-major decode of a token row index to its (t, h, w) position."""
        hw = self.h_extent * self.w_extent
        return row // hw, (row % hw) // self.w_extent, row % self.w_extent


def from_grid(grid: Tensor, like: TokenTensor | None = None, **meta) -> TokenTensor:
    t, h, w, c = grid.shape
    data = reshape(grid, (t * h * w, c))
    if like is not None:
        meta.setdefault("clip_index", like.clip_index)
        meta.setdefault("video_id", like.video_id)
    return TokenTensor(data, t, h, w, **meta)
