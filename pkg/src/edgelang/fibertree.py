"""Format-agnostic sparse tensors.

A tensor is a tree of *fibers*: one sorted coordinate->payload map per rank,
where payloads are sub-fibers until the last rank, whose payloads are leaf
values.  Only non-empty leaves are stored (storing a tensor's empty value
deletes the point) and fibers are pruned as soon as they have no surviving
children, so occupancy is exactly the number of stored leaves.

Coordinates are non-negative machine integers.  A rank declared without a
shape is *unbounded* (used for the generative rank of iterative programs);
bounded ranks reject out-of-range writes and answer the empty value for
out-of-range reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from .errors import DeclError, DtypeError, EdgeError
from .scalars import DType, check_value, format_value

Shape = Union[int, str, None]  # literal size, named size parameter, unbounded


@dataclass(frozen=True)
class RankDecl:
    """One axis of a tensor: an uppercase name plus its shape."""

    name: str
    shape: Shape = None

    def __post_init__(self):
        if not self.name or not self.name[0].isupper():
            raise DeclError(f"rank name {self.name!r} must start uppercase")
        if isinstance(self.shape, int) and self.shape <= 0:
            raise DeclError(f"rank {self.name} needs a positive shape")


@dataclass(frozen=True)
class TensorDecl:
    name: str
    ranks: tuple[RankDecl, ...]
    dtype: DType
    empty: object

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(self.ranks))
        names = [r.name for r in self.ranks]
        if len(set(names)) != len(names):
            raise DeclError(f"tensor {self.name}: duplicate rank names {names}")
        unbounded = [i for i, r in enumerate(self.ranks) if r.shape is None]
        if len(unbounded) > 1 or (unbounded and unbounded[0] != 0):
            raise DeclError(
                f"tensor {self.name}: at most one unbounded rank, listed first"
            )
        try:
            object.__setattr__(self, "empty", check_value(self.dtype, self.empty))
        except DtypeError as e:
            raise DeclError(f"tensor {self.name}: empty value: {e}") from e

    @property
    def ndim(self) -> int:
        return len(self.ranks)

    def size_params(self) -> set[str]:
        return {r.shape for r in self.ranks if isinstance(r.shape, str)}

    def resolve(self, sizes: Optional[dict] = None) -> "TensorDecl":
        """Bind named size parameters to concrete integers."""
        ranks = []
        for r in self.ranks:
            shape = r.shape
            if isinstance(shape, str):
                if not sizes or shape not in sizes:
                    raise DeclError(
                        f"tensor {self.name}: size parameter |{shape}| is unbound"
                    )
                shape = int(sizes[shape])
                if shape <= 0:
                    raise DeclError(f"|{r.shape}| must be positive")
            ranks.append(RankDecl(r.name, shape))
        return TensorDecl(self.name, tuple(ranks), self.dtype, self.empty)


class Tensor:
    """A sparse N-dimensional container backed by nested sorted dicts."""

    __slots__ = ("decl", "root")

    def __init__(self, decl: TensorDecl):
        for r in decl.ranks:
            if isinstance(r.shape, str):
                raise DeclError(
                    f"tensor {decl.name}: resolve |{r.shape}| before instantiating"
                )
        self.decl = decl
        self.root: dict = {}

    # -- basic queries ------------------------------------------------------

    @property
    def ndim(self) -> int:
        return self.decl.ndim

    @property
    def empty(self):
        return self.decl.empty

    def _check_arity(self, point):
        if len(point) != self.ndim:
            raise EdgeError(
                f"tensor {self.decl.name}: point {point} has arity {len(point)}, "
                f"expected {self.ndim}"
            )

    def in_shape(self, point) -> bool:
        for coord, rank in zip(point, self.decl.ranks):
            if coord < 0:
                return False
            if rank.shape is not None and coord >= rank.shape:
                return False
        return True

    def get(self, point):
        """The stored value, or the empty value for absent/out-of-range points."""
        self._check_arity(point)
        if self.ndim == 0:
            return self.root.get((), self.decl.empty)
        node = self.root
        for coord in point[:-1]:
            node = node.get(coord)
            if node is None:
                return self.decl.empty
        return node.get(point[-1], self.decl.empty)

    def exists(self, point) -> bool:
        return self.get(point) != self.decl.empty

    def set(self, point, value) -> None:
        """Store ``value`` at ``point``; storing the empty value deletes."""
        self._check_arity(point)
        if not self.in_shape(point):
            raise EdgeError(
                f"tensor {self.decl.name}: point {point} is out of shape"
            )
        value = check_value(self.decl.dtype, value)
        if value == self.decl.empty:
            self._delete(point)
            return
        if self.ndim == 0:
            self.root[()] = value
            return
        node = self.root
        for coord in point[:-1]:
            nxt = node.get(coord)
            if nxt is None:
                nxt = node[coord] = {}
            node = nxt
        node[point[-1]] = value

    def _delete(self, point) -> None:
        if self.ndim == 0:
            self.root.pop((), None)
            return
        path = []
        node = self.root
        for coord in point[:-1]:
            nxt = node.get(coord)
            if nxt is None:
                return
            path.append((node, coord))
            node = nxt
        if point[-1] not in node:
            return
        del node[point[-1]]
        # prune emptied ancestor fibers
        for parent, coord in reversed(path):
            if parent[coord]:
                break
            del parent[coord]

    def occupancy(self) -> int:
        def count(node, depth):
            if depth == self.ndim - 1:
                return len(node)
            return sum(count(child, depth + 1) for child in node.values())

        if self.ndim == 0:
            return len(self.root)
        return count(self.root, 0)

    def fiber_at(self, prefix) -> list:
        """Sorted (coordinate, payload) pairs of the fiber under ``prefix``.

        Payloads are leaf values when the prefix addresses the last rank and
        sub-fiber mappings otherwise.  An absent prefix yields [].
        """
        if len(prefix) >= self.ndim:
            raise EdgeError(
                f"fiber_at prefix {prefix} too long for a {self.ndim}-rank tensor"
            )
        node = self.root
        for coord in prefix:
            node = node.get(coord)
            if node is None:
                return []
        return sorted(node.items())

    def iterate_nonempty(self) -> Iterator[tuple[tuple, object]]:
        """Yield (point, value) in lexicographically ascending order."""

        def walk(node, depth, prefix):
            if depth == self.ndim - 1:
                for coord in sorted(node):
                    yield prefix + (coord,), node[coord]
                return
            for coord in sorted(node):
                yield from walk(node[coord], depth + 1, prefix + (coord,))

        if self.ndim == 0:
            return iter(sorted(self.root.items()))
        return walk(self.root, 0, ())

    # -- whole-tensor operations --------------------------------------------

    def swizzle(self, order) -> "Tensor":
        """Reorder ranks: point p of the result equals point permute(p) here."""
        if sorted(order) != list(range(self.ndim)):
            raise EdgeError(f"{order!r} is not a permutation of 0..{self.ndim - 1}")
        ranks = tuple(self.decl.ranks[i] for i in order)
        out = Tensor(TensorDecl(self.decl.name, ranks, self.decl.dtype, self.decl.empty))
        for point, value in self.iterate_nonempty():
            out.set(tuple(point[i] for i in order), value)
        return out

    def equals(self, other: "Tensor") -> bool:
        """Content equality: same non-empty points with equal values.

        Shapes and empty values are ignored so that generational slices of
        differing nominal shape compare by what they hold.
        """
        if self.ndim != other.ndim:
            raise EdgeError(
                f"rank-count mismatch: {self.ndim} vs {other.ndim}"
            )
        return dict(self.iterate_nonempty()) == dict(other.iterate_nonempty())

    def copy(self, name: Optional[str] = None) -> "Tensor":
        decl = self.decl
        if name is not None:
            decl = TensorDecl(name, decl.ranks, decl.dtype, decl.empty)
        out = Tensor(decl)
        for point, value in self.iterate_nonempty():
            out.set(point, value)
        return out

    # -- text dump ------------------------------------------------------------

    def dump_lines(self) -> Iterator[str]:
        shape = ",".join(
            "*" if r.shape is None else str(r.shape) for r in self.decl.ranks
        )
        yield (
            f"# {self.decl.name} ranks={self.ndim} shape={shape} "
            f"dtype={self.decl.dtype} "
            f"empty={format_value(self.decl.dtype, self.decl.empty)}"
        )
        for point, value in self.iterate_nonempty():
            coords = " ".join(str(c) for c in point)
            sep = " " if coords else ""
            yield f"{self.decl.name} {coords}{sep}{format_value(self.decl.dtype, value)}"

    def dumps(self) -> str:
        return "\n".join(self.dump_lines()) + "\n"

    def __repr__(self):
        return f"<Tensor {self.decl.name} occupancy={self.occupancy()}>"


def new_tensor(decl: TensorDecl) -> Tensor:
    return Tensor(decl)
