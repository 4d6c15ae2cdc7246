"""Scalar values and datatypes.

Tensors hold one of three datatypes: extended integers (64-bit range plus
the +inf/-inf sentinels), IEEE doubles, and booleans.  Values are stored as
plain Python objects (``int``/``float``/``bool``, with ``math.inf`` standing
in for the integer sentinels) so that hot loops avoid wrapper allocation;
this module centralises the rules for checking, formatting, arithmetic and
casting on those values.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .errors import DtypeError, EvalError

INF = math.inf


class DType(enum.Enum):
    INT = "int"
    FLOAT = "float"
    BOOL = "bool"

    def __str__(self) -> str:
        return self.value


_INT64_MAX = 2**63 - 1
_INT64_MIN = -(2**63)


@dataclass(frozen=True)
class Scalar:
    """A tagged scalar, used where a value travels without its tensor."""

    dtype: DType
    value: object

    def __post_init__(self):
        object.__setattr__(self, "value", check_value(self.dtype, self.value))


def is_inf(v) -> bool:
    return isinstance(v, float) and math.isinf(v)


def check_value(dtype: DType, v):
    """Normalise ``v`` to the canonical representation of ``dtype``.

    Raises DtypeError when the value cannot represent the datatype.  Note
    bool is checked before int since Python bools are ints.
    """
    if dtype is DType.BOOL:
        if isinstance(v, bool):
            return v
        raise DtypeError(f"expected a boolean, got {v!r}")
    if dtype is DType.INT:
        if isinstance(v, bool):
            raise DtypeError(f"expected an integer, got {v!r}")
        if isinstance(v, int):
            if not _INT64_MIN <= v <= _INT64_MAX:
                raise DtypeError(f"integer {v} out of 64-bit range")
            return v
        if is_inf(v):
            return v
        raise DtypeError(f"expected an integer or +/-inf, got {v!r}")
    if dtype is DType.FLOAT:
        if isinstance(v, bool):
            raise DtypeError(f"expected a float, got {v!r}")
        if isinstance(v, (int, float)):
            f = float(v)
            if math.isnan(f):
                raise DtypeError("NaN is not a representable value")
            return f
        raise DtypeError(f"expected a float, got {v!r}")
    raise DtypeError(f"unknown dtype {dtype!r}")


def infer_dtype(v) -> DType:
    if isinstance(v, bool):
        return DType.BOOL
    if isinstance(v, int):
        return DType.INT
    if isinstance(v, float):
        return DType.INT if is_inf(v) else DType.FLOAT
    raise DtypeError(f"cannot infer a dtype for {v!r}")


def format_value(dtype: DType, v) -> str:
    """Canonical text form, used by tensor dumps and the pretty-printer."""
    if dtype is DType.BOOL:
        return "true" if v else "false"
    if is_inf(v):
        return "inf" if v > 0 else "-inf"
    if dtype is DType.FLOAT:
        return repr(float(v))
    return str(v)


def parse_value(dtype: DType, text: str):
    text = text.strip()
    if dtype is DType.BOOL:
        if text == "true":
            return True
        if text == "false":
            return False
        raise DtypeError(f"bad boolean literal {text!r}")
    if text == "inf":
        return INF
    if text == "-inf":
        return -INF
    if dtype is DType.INT:
        return check_value(dtype, int(text))
    return check_value(dtype, float(text))


def cast_value(v, src_dtype: DType, src_empty, dst_dtype: DType):
    """Cast ``v`` between datatypes.

    int/float -> bool uses the emptiness convention: the result is true iff
    the value differs from the *source tensor's* empty value, which the
    caller must supply.  bool -> numeric maps true/false to 1/0, and
    numeric conversions keep infinities.
    """
    if src_dtype is dst_dtype:
        return v
    if dst_dtype is DType.BOOL:
        if src_empty is None:
            return bool(v)
        return v != src_empty
    if src_dtype is DType.BOOL:
        n = 1 if v else 0
        return float(n) if dst_dtype is DType.FLOAT else n
    if dst_dtype is DType.FLOAT:
        return float(v)
    # float -> int
    if is_inf(v):
        return v
    if v != int(v):
        raise DtypeError(f"cannot cast non-integral {v!r} to int")
    return check_value(DType.INT, int(v))


# ---------------------------------------------------------------------------
# Extended-integer arithmetic.  Also reused by float computes; Python floats
# already behave correctly for everything except the error cases below.


def ext_add(a, b):
    if is_inf(a) and is_inf(b) and (a > 0) != (b > 0):
        raise EvalError("(+inf) + (-inf) is undefined")
    r = a + b
    if isinstance(a, int) and isinstance(b, int):
        return check_value(DType.INT, r)
    return r


def ext_mul(a, b):
    # 0 * (+/-inf) = 0 keeps multiplication consistent with empty = 0.
    if (a == 0 and is_inf(b)) or (b == 0 and is_inf(a)):
        return 0
    r = a * b
    if isinstance(a, int) and isinstance(b, int):
        return check_value(DType.INT, r)
    return r
