"""Grid decomposition of images into non-overlapping subimages.

Cells are indexed ``(i, j)`` with ``i`` the grid row and ``j`` the column,
and flattened row-major from the top-left (``index = i * M + j``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_op


@dataclass(frozen=True)
class PartitionLayout:
    N: int
    M: int
    heights: tuple[int, ...]
    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.heights) != self.N or len(self.widths) != self.M:
            raise ValueError("heights/widths must have N and M entries")
        if min(self.heights + self.widths) <= 0:
            raise ValueError("every subimage needs positive size")

    @property
    def H(self) -> int:
        return sum(self.heights)

    @property
    def W(self) -> int:
        return sum(self.widths)

    @property
    def num_cells(self) -> int:
        return self.N * self.M

    def cells(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.N) for j in range(self.M)]

    def row_offsets(self) -> list[int]:
        return [0, *np.cumsum(self.heights).tolist()]

    def col_offsets(self) -> list[int]:
        return [0, *np.cumsum(self.widths).tolist()]

    def cell_slices(self, i: int, j: int) -> tuple[slice, slice]:
        r, c = self.row_offsets(), self.col_offsets()
        return slice(r[i], r[i + 1]), slice(c[j], c[j + 1])

    def is_uniform(self) -> bool:
        return len(set(self.heights)) == 1 and len(set(self.widths)) == 1


def _split_sizes(total: int, parts: int) -> tuple[int, ...]:
    base, extra = divmod(total, parts)
    return tuple(base + 1 if k < extra else base for k in range(parts))


def make_layout(H: int, W: int, N: int, M: int) -> PartitionLayout:
    """Split H x W into N x M cells; the first ``H mod N`` rows get one extra pixel."""
    if min(H, W, N, M) <= 0:
        raise ValueError("image dims and grid dims must be positive")
    if N > H or M > W:
        raise ValueError(f"cannot split {H}x{W} into a {N}x{M} grid")
    return PartitionLayout(N, M, _split_sizes(H, N), _split_sizes(W, M))


def _check_grid(grid, layout: PartitionLayout) -> None:
    if len(grid) != layout.N or any(len(row) != layout.M for row in grid):
        raise ValueError(f"grid must be {layout.N}x{layout.M}")


def partition(x: Tensor, layout: PartitionLayout) -> list[list[Tensor]]:
    """Cut the spatial dims of ``x`` into the layout's cells.

    Works on any tensor whose last two axes are (height, width).
    """
    if x.shape[-2:] != (layout.H, layout.W):
        raise ValueError(f"tensor spatial dims {x.shape[-2:]} do not match layout {layout.H}x{layout.W}")
    grid = []
    for i in range(layout.N):
        row = []
        for j in range(layout.M):
            rs, cs = layout.cell_slices(i, j)
            row.append(_crop(x, rs, cs))
        grid.append(row)
    return grid


def _crop(x: Tensor, rs: slice, cs: slice) -> Tensor:
    out = x.data[..., rs, cs].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., rs, cs] = g
        return (full,)

    return make_op(out, (x,), backward, "crop")


def stitch(grid: list[list[Tensor]], layout: PartitionLayout) -> Tensor:
    """Inverse of :func:`partition`."""
    _check_grid(grid, layout)
    lead = grid[0][0].shape[:-2]
    for i, j in layout.cells():
        cell = grid[i][j]
        if cell.shape[:-2] != lead:
            raise ValueError(f"cell ({i},{j}) has leading dims {cell.shape[:-2]}, expected {lead}")
        if cell.shape[-2:] != (layout.heights[i], layout.widths[j]):
            raise ValueError(f"cell ({i},{j}) has spatial dims {cell.shape[-2:]}, layout expects "
                             f"{(layout.heights[i], layout.widths[j])}")
    out = np.block([[grid[i][j].data for j in range(layout.M)] for i in range(layout.N)])
    flat = [grid[i][j] for i, j in layout.cells()]
    slices = [layout.cell_slices(i, j) for i, j in layout.cells()]

    def backward(g):
        return tuple(g[..., rs, cs] for rs, cs in slices)

    return make_op(out, tuple(flat), backward, "stitch")


def concat_grid(feature_maps: list[list[Tensor]], layout: PartitionLayout) -> Tensor:
    """Place equally shaped (n, c, h, w) cells side by side -> (n, c, N*h, M*w)."""
    _check_grid(feature_maps, layout)
    shape = feature_maps[0][0].shape
    for i, j in layout.cells():
        if feature_maps[i][j].shape != shape:
            raise ValueError(f"cell ({i},{j}) has shape {feature_maps[i][j].shape}, expected {shape}")
    h, w = shape[-2:]
    cell_layout = PartitionLayout(layout.N, layout.M, (h,) * layout.N, (w,) * layout.M)
    return stitch(feature_maps, cell_layout)


def split_grid(x: Tensor, layout: PartitionLayout) -> list[list[Tensor]]:
    """Inverse of :func:`concat_grid`: cut into N x M equal cells."""
    H, W = x.shape[-2:]
    if H % layout.N or W % layout.M:
        raise ValueError(f"{H}x{W} map does not split evenly into {layout.N}x{layout.M} cells")
    cell_layout = PartitionLayout(layout.N, layout.M, (H // layout.N,) * layout.N, (W // layout.M,) * layout.M)
    return partition(x, cell_layout)
