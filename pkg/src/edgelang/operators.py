"""Operator registry: merge truth tables, compute, unary and coordinate ops.

Merge operators decide, from the two existence bits of an iteration-space
point, whether the point is effectual at all; there are exactly sixteen of
them.  Compute operators combine the two data values of points that survive
the merge; coordinate operators are populate's fiber-level filters; unary
operators transform single operand values in place.

The registry is immutable once built.  User operators registered through
:func:`register_user_op` must be pure and reentrant.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import EdgeError, EvalError
from .scalars import DType, cast_value, ext_add, ext_mul, infer_dtype, is_inf

# ---------------------------------------------------------------------------
# Merge operators.  Tables are indexed by (exists-left, exists-right) as
# (FF, FT, TF, TT).

MERGE_TABLES: dict[str, tuple[bool, bool, bool, bool]] = {
    "pass": (True, True, True, True),
    "none": (False, False, False, False),
    "cap": (False, False, False, True),
    "cup": (False, True, True, True),
    "xor": (False, True, True, False),
    "nor": (True, False, False, False),
    "eqv": (True, False, False, True),
    "nand": (True, True, True, False),
    "lonly": (False, False, True, False),
    "ronly": (False, True, False, False),
    "left": (False, False, True, True),
    "right": (False, True, False, True),
    "notl": (True, True, False, False),
    "notr": (True, False, True, False),
    "aimpb": (True, True, False, True),
    "bimpa": (True, False, True, True),
}


def merge_eval(name: str, in_left: bool, in_right: bool) -> bool:
    try:
        table = MERGE_TABLES[name]
    except KeyError:
        raise EdgeError(f"unknown merge operator {name!r}") from None
    return table[(2 if in_left else 0) + (1 if in_right else 0)]


# ---------------------------------------------------------------------------
# Compute operators.
#
# Signature: fn(point, left, right, left_exists, right_exists) -> value|None.
# ``point`` is a mapping of the rank variables bound at this node.  Absent
# operands arrive as their tensor's empty value with the exists flag False.
# Returning None means "no result" (the output point stays empty).


@dataclass(frozen=True)
class ComputeOp:
    name: str
    fn: Callable
    commutative: bool = False
    associative: bool = False


@dataclass(frozen=True)
class UnaryOp:
    name: str
    fn: Callable  # value -> value


@dataclass(frozen=True)
class CoordinateOp:
    """Populate's fiber filter.

    ``fn(point, rhs_coord, rhs_value, fiber)`` receives the sorted
    (coordinate, value) items of the current output fiber and returns the
    surviving items.  Survivor coordinates must come from the fiber or be
    the RHS coordinate.
    """

    name: str
    fn: Callable
    arg: Optional[int] = None

    @property
    def display(self) -> str:
        return self.name if self.arg is None else f"{self.name}({self.arg})"


def _truthy(v) -> bool:
    return bool(v)


def _op_add(point, l, r, le, re):
    return ext_add(l, r)


def _op_mul(point, l, r, le, re):
    return ext_mul(l, r)


def _op_min(point, l, r, le, re):
    return min(l, r)


def _op_max(point, l, r, le, re):
    return max(l, r)


def _op_and(point, l, r, le, re):
    return _truthy(l) and _truthy(r)


def _op_or(point, l, r, le, re):
    return _truthy(l) or _truthy(r)


def _op_any(point, l, r, le, re):
    # Deterministic "pick any": keep the first under canonical order.
    return l


def _op_takeleft(point, l, r, le, re):
    return l


def _op_takeright(point, l, r, le, re):
    return r


def _op_update(point, l, r, le, re):
    # Keep the newer (right) value wherever it exists.
    return r if re else l


def _op_ifeq(point, l, r, le, re):
    return l if l == r else None


def _op_leqsel(point, l, r, le, re):
    return r if r <= l else None


def _op_pow(point, l, r, le, re):
    try:
        v = l**r
    except (ZeroDivisionError, OverflowError) as e:
        raise EvalError(f"pow({l}, {r}): {e}") from e
    if isinstance(v, complex) or (isinstance(v, float) and math.isnan(v)):
        raise EvalError(f"pow({l}, {r}) is not representable")
    if isinstance(l, int) and not isinstance(l, bool) and isinstance(v, float) and not is_inf(v):
        if v != int(v):
            raise EvalError(f"pow({l}, {r}) is not an integer")
        v = int(v)
    return v


def _unary_not(v):
    return not _truthy(v)


def _unary_eexp(v):
    try:
        return math.exp(v)
    except OverflowError:
        return math.inf


def _unary_neg(v):
    return -v


def _coord_pass(point, coord, value, fiber):
    out = [cv for cv in fiber if cv[0] != coord]
    out.append((coord, value))
    return out


def _keep_by_value(fiber, coord, value, k, largest):
    cands = [cv for cv in fiber if cv[0] != coord]
    cands.append((coord, value))
    # ties prefer the smaller coordinate: sort by coordinate first, then
    # stable-sort by value.
    cands.sort(key=lambda cv: cv[0])
    cands.sort(key=lambda cv: cv[1], reverse=largest)
    return cands[:k]


def _keep_by_coord(fiber, coord, value, k, largest):
    cands = [cv for cv in fiber if cv[0] != coord]
    cands.append((coord, value))
    cands.sort(key=lambda cv: cv[0], reverse=largest)
    return cands[:k]


def _make_valsel(k: int, largest: bool):
    def fn(point, coord, value, fiber):
        return _keep_by_value(fiber, coord, value, k, largest)

    return fn


def _make_coordsel(k: int, largest: bool):
    def fn(point, coord, value, fiber):
        return _keep_by_coord(fiber, coord, value, k, largest)

    return fn


# ---------------------------------------------------------------------------


class OperatorRegistry:
    def __init__(self):
        self.compute: dict[str, ComputeOp] = {}
        self.unary: dict[str, UnaryOp] = {}
        self._coord_makers: dict[str, Callable[[Optional[int]], CoordinateOp]] = {}

    # -- lookups -------------------------------------------------------------

    def get_compute(self, name: str) -> ComputeOp:
        try:
            return self.compute[name]
        except KeyError:
            raise EdgeError(f"unknown compute operator {name!r}") from None

    def get_unary(self, name: str) -> UnaryOp:
        try:
            return self.unary[name]
        except KeyError:
            raise EdgeError(f"unknown unary operator {name!r}") from None

    def get_coordinate(self, name: str, arg: Optional[int] = None) -> CoordinateOp:
        try:
            maker = self._coord_makers[name]
        except KeyError:
            raise EdgeError(f"unknown coordinate operator {name!r}") from None
        return maker(arg)

    def has_compute(self, name):
        return name in self.compute

    def has_unary(self, name):
        return name in self.unary

    def has_coordinate(self, name):
        return name in self._coord_makers

    # -- registration ----------------------------------------------------------

    def add_compute(self, op: ComputeOp, verify: bool = True):
        if op.name in self.compute:
            raise EdgeError(f"compute operator {op.name!r} already registered")
        if verify:
            _verify_flags(op)
        self.compute[op.name] = op

    def add_unary(self, op: UnaryOp):
        if op.name in self.unary:
            raise EdgeError(f"unary operator {op.name!r} already registered")
        self.unary[op.name] = op

    def add_coordinate_maker(self, name: str, maker):
        if name in self._coord_makers:
            raise EdgeError(f"coordinate operator {name!r} already registered")
        self._coord_makers[name] = maker


def _verify_flags(op: ComputeOp, samples: int = 1000) -> None:
    """Spot-check declared commutativity/associativity on random triples."""
    rng = random.Random(0xED6E ^ hash(op.name))
    if not (op.commutative or op.associative):
        return

    def draw():
        return rng.randint(1, 50)

    for _ in range(samples):
        a, b, c = draw(), draw(), draw()
        try:
            if op.commutative:
                if op.fn({}, a, b, True, True) != op.fn({}, b, a, True, True):
                    raise EdgeError(f"{op.name} is not commutative: ({a}, {b})")
            if op.associative:
                ab = op.fn({}, a, b, True, True)
                bc = op.fn({}, b, c, True, True)
                if op.fn({}, ab, c, True, True) != op.fn({}, a, bc, True, True):
                    raise EdgeError(f"{op.name} is not associative: ({a}, {b}, {c})")
        except EvalError:
            continue


def builtin_registry() -> OperatorRegistry:
    reg = OperatorRegistry()
    for op in [
        ComputeOp("add", _op_add, commutative=True, associative=True),
        ComputeOp("mul", _op_mul, commutative=True, associative=True),
        ComputeOp("min", _op_min, commutative=True, associative=True),
        ComputeOp("max", _op_max, commutative=True, associative=True),
        ComputeOp("and", _op_and, commutative=True, associative=True),
        ComputeOp("or", _op_or, commutative=True, associative=True),
        ComputeOp("any", _op_any),
        ComputeOp("takeleft", _op_takeleft),
        ComputeOp("takeright", _op_takeright),
        ComputeOp("update", _op_update),
        ComputeOp("pass", _op_takeright),
        ComputeOp("ifeq", _op_ifeq, commutative=True),
        ComputeOp("leqsel", _op_leqsel),
        ComputeOp("pow", _op_pow),
    ]:
        reg.add_compute(op)
    reg.add_unary(UnaryOp("not", _unary_not))
    reg.add_unary(UnaryOp("eexp", _unary_eexp))
    reg.add_unary(UnaryOp("neg", _unary_neg))

    def maker_pass(arg):
        if arg is not None:
            raise EdgeError("coordinate operator 'pass' takes no argument")
        return CoordinateOp("pass", _coord_pass)

    def make_k(name, builder, largest):
        def maker(arg):
            if arg is None or arg < 1:
                raise EdgeError(f"coordinate operator {name!r} needs a count >= 1")
            return CoordinateOp(name, builder(arg, largest), arg)

        return maker

    reg.add_coordinate_maker("pass", maker_pass)
    reg.add_coordinate_maker("minval", make_k("minval", _make_valsel, False))
    reg.add_coordinate_maker("maxval", make_k("maxval", _make_valsel, True))
    reg.add_coordinate_maker("mincoord", make_k("mincoord", _make_coordsel, False))
    reg.add_coordinate_maker("maxcoord", make_k("maxcoord", _make_coordsel, True))
    return reg


def register_user_op(
    registry: OperatorRegistry,
    name: str,
    kind: str,
    fn: Callable,
    commutative: bool = False,
    associative: bool = False,
) -> None:
    """Register a library-defined operator under ``name``.

    Binary functions take (point, left, right); existence-aware functions
    may accept the two extra flags.  Coordinate functions take
    (point, rhs_coord, rhs_value, fiber_items) and return surviving items.
    """
    if kind == "binary":

        def wrapped(point, l, r, le, re, _fn=fn):
            try:
                return _fn(point, l, r, le, re)
            except TypeError:
                return _fn(point, l, r)

        registry.add_compute(
            ComputeOp(name, wrapped, commutative=commutative, associative=associative)
        )
    elif kind == "unary":
        registry.add_unary(UnaryOp(name, fn))
    elif kind == "coordinate":
        def maker(arg, _fn=fn):
            return CoordinateOp(name, _fn, arg)

        registry.add_coordinate_maker(name, maker)
    else:
        raise EdgeError(f"unknown operator kind {kind!r}")


# ---------------------------------------------------------------------------
# Casting discipline shared by the engine and the dense oracle.


def coerce_operands(l, l_dtype, l_empty, r, r_dtype, r_empty, out_dtype):
    """Cast mixed-dtype operands to the output dtype before compute.

    Same-dtype operands pass through untouched so value-level comparisons
    (min, ifeq, leqsel) see the original payloads.
    """
    if l_dtype is r_dtype:
        return l, r
    return (
        cast_value(l, l_dtype, l_empty, out_dtype),
        cast_value(r, r_dtype, r_empty, out_dtype),
    )


def coerce_result(v, l_dtype, l_empty, r_dtype, r_empty, out_dtype):
    """Bring a compute result into the output dtype.

    The emptiness source for an int/float -> bool cast is taken from the
    operand whose dtype produced the value.
    """
    vd = infer_dtype(v)
    if vd is out_dtype:
        return v
    if vd is l_dtype:
        return cast_value(v, vd, l_empty, out_dtype)
    if vd is r_dtype:
        return cast_value(v, vd, r_empty, out_dtype)
    return cast_value(v, vd, None, out_dtype)
