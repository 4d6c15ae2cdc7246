"""Language object model: rank expressions, accesses, statements, cascades.

The parser produces the *surface* form (case statements and the ``<<``
update shorthand intact, defaults unfilled).  :func:`lower` rewrites a
program into the executable core form: sugar expanded, every binary node
given a map action, dropped ranks covered by a reduce.  :func:`validate`
checks both forms and returns diagnostics instead of raising.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from .errors import EdgeError
from .fibertree import RankDecl, TensorDecl
from .operators import MERGE_TABLES, OperatorRegistry, builtin_registry
from .scalars import DType

MAX_GEN_OFFSET = 3

# ---------------------------------------------------------------------------
# Rank expressions and conditions


@dataclass(frozen=True)
class RVar:
    name: str


@dataclass(frozen=True)
class RConst:
    value: int


@dataclass(frozen=True)
class ROffset:
    name: str
    delta: int  # non-zero; coordinate = var + delta


@dataclass(frozen=True)
class RSum:
    left: str
    right: str


@dataclass(frozen=True)
class RMin:
    left: str
    right: str


@dataclass(frozen=True)
class RMax:
    left: str
    right: str


@dataclass(frozen=True)
class RTernary:
    cond: "Cond"
    then: "RankExpr"
    other: "RankExpr"


RankExpr = Union[RVar, RConst, ROffset, RSum, RMin, RMax, RTernary]


@dataclass(frozen=True)
class CCompare:
    left: RankExpr
    op: str  # < <= > >= == !=
    right: RankExpr


@dataclass(frozen=True)
class CInList:
    var: str
    listname: str


@dataclass(frozen=True)
class CAnd:
    left: "Cond"
    right: "Cond"


Cond = Union[CCompare, CInList, CAnd]

_CMP = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}

NEGATED_CMP = {"<": ">=", "<=": ">", ">": "<=", ">=": "<", "==": "!=", "!=": "=="}


def eval_rank_expr(e: RankExpr, env: dict) -> int:
    if isinstance(e, RVar):
        return env[e.name]
    if isinstance(e, RConst):
        return e.value
    if isinstance(e, ROffset):
        return env[e.name] + e.delta
    if isinstance(e, RSum):
        return env[e.left] + env[e.right]
    if isinstance(e, RMin):
        return min(env[e.left], env[e.right])
    if isinstance(e, RMax):
        return max(env[e.left], env[e.right])
    if isinstance(e, RTernary):
        branch = e.then if eval_cond(e.cond, env, {}) else e.other
        return eval_rank_expr(branch, env)
    raise EdgeError(f"bad rank expression {e!r}")


def eval_cond(c: Cond, env: dict, lists: dict) -> bool:
    if isinstance(c, CCompare):
        return _CMP[c.op](eval_rank_expr(c.left, env), eval_rank_expr(c.right, env))
    if isinstance(c, CInList):
        return env[c.var] in lists[c.listname]
    if isinstance(c, CAnd):
        return eval_cond(c.left, env, lists) and eval_cond(c.right, env, lists)
    raise EdgeError(f"bad condition {c!r}")


def rank_expr_vars(e: RankExpr) -> list[str]:
    if isinstance(e, RVar):
        return [e.name]
    if isinstance(e, RConst):
        return []
    if isinstance(e, ROffset):
        return [e.name]
    if isinstance(e, (RSum, RMin, RMax)):
        return [e.left, e.right]
    if isinstance(e, RTernary):
        return (
            cond_vars(e.cond) + rank_expr_vars(e.then) + rank_expr_vars(e.other)
        )
    raise EdgeError(f"bad rank expression {e!r}")


def cond_vars(c: Cond) -> list[str]:
    if isinstance(c, CCompare):
        return rank_expr_vars(c.left) + rank_expr_vars(c.right)
    if isinstance(c, CInList):
        return [c.var]
    if isinstance(c, CAnd):
        return cond_vars(c.left) + cond_vars(c.right)
    raise EdgeError(f"bad condition {c!r}")


def cond_lists(c: Cond) -> list[str]:
    if isinstance(c, CInList):
        return [c.listname]
    if isinstance(c, CAnd):
        return cond_lists(c.left) + cond_lists(c.right)
    return []


# ---------------------------------------------------------------------------
# Accesses and right-hand sides


@dataclass(frozen=True)
class Subscript:
    expr: RankExpr
    constraint: Optional[Cond] = None
    mutable: bool = False


@dataclass(frozen=True)
class Access:
    tensor: str
    subs: tuple[Subscript, ...] = ()
    unary: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "subs", tuple(self.subs))


@dataclass(frozen=True)
class RhsLeaf:
    access: Access


@dataclass(frozen=True)
class RhsRankVar:
    name: str


@dataclass(frozen=True)
class RhsLit:
    value: object


@dataclass(frozen=True)
class RhsBinary:
    label: int
    left: "RhsExpr"
    right: "RhsExpr"


RhsExpr = Union[RhsLeaf, RhsRankVar, RhsLit, RhsBinary]


# ---------------------------------------------------------------------------
# Actions and statements


@dataclass(frozen=True)
class MapAction:
    label: int
    ranks: tuple[str, ...]
    compute: str
    merge: str = "pass"

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(self.ranks))


@dataclass(frozen=True)
class ReduceAction:
    label: Optional[int]
    ranks: tuple[str, ...]
    compute: str
    merge: str = "pass"

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(self.ranks))


@dataclass(frozen=True)
class PopulateAction:
    ranks: tuple[str, ...]
    compute: str = "pass"
    coord: str = "pass"
    coord_arg: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(self.ranks))


Action = Union[MapAction, ReduceAction, PopulateAction]


@dataclass(frozen=True)
class EinsumStmt:
    output: Access
    rhs: RhsExpr
    actions: tuple[Action, ...] = ()
    is_update: bool = False  # written with "<<"
    span: object = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))

    @property
    def maps(self) -> list[MapAction]:
        return [a for a in self.actions if isinstance(a, MapAction)]

    @property
    def reduces(self) -> list[ReduceAction]:
        return [a for a in self.actions if isinstance(a, ReduceAction)]

    @property
    def populate(self) -> Optional[PopulateAction]:
        pops = [a for a in self.actions if isinstance(a, PopulateAction)]
        return pops[0] if pops else None


@dataclass(frozen=True)
class CaseArm:
    guard: Optional[Cond]  # None = else
    rhs: RhsExpr
    actions: tuple[Action, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))


@dataclass(frozen=True)
class CaseStmt:
    output: Access
    arms: tuple[CaseArm, ...]
    span: object = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))


@dataclass(frozen=True)
class StopNnzZero:
    tensor: str
    offset: int


@dataclass(frozen=True)
class StopEqual:
    tensor_a: str
    offset_a: int
    tensor_b: str
    offset_b: int


StopCond = Union[StopNnzZero, StopEqual]


@dataclass(frozen=True)
class Cascade:
    body: tuple  # of EinsumStmt | CaseStmt | Cascade
    var: str = "i"
    stop: Optional[StopCond] = None

    def __post_init__(self):
        object.__setattr__(self, "body", tuple(self.body))


@dataclass(frozen=True)
class InitUser:
    tensor: str
    span: object = field(default=None, compare=False)


@dataclass(frozen=True)
class Program:
    decls: tuple[TensorDecl, ...]
    inits: tuple  # of InitUser | EinsumStmt | CaseStmt
    body: Cascade

    def __post_init__(self):
        object.__setattr__(self, "decls", tuple(self.decls))
        object.__setattr__(self, "inits", tuple(self.inits))

    def decl_map(self) -> dict[str, TensorDecl]:
        return {d.name: d for d in self.decls}

    def user_tensors(self) -> list[str]:
        return [i.tensor for i in self.inits if isinstance(i, InitUser)]

    def size_params(self) -> set[str]:
        out = set()
        for d in self.decls:
            out |= d.size_params()
        return out

    def list_names(self) -> set[str]:
        names: set[str] = set()
        for stmt, _ in iter_statements(self):
            for acc in stmt_accesses(stmt):
                for sub in acc.subs:
                    if sub.constraint is not None:
                        names.update(cond_lists(sub.constraint))
        return names


def iter_statements(program: Program):
    """Yield (stmt, cascade-variable-stack) for every statement, inits first."""

    def walk(items, varstack):
        for item in items:
            if isinstance(item, Cascade):
                yield from walk(item.body, varstack + (item.var,))
            else:
                yield item, varstack

    yield from walk([i for i in program.inits if not isinstance(i, InitUser)], ())
    yield from walk(program.body.body, (program.body.var,))


def stmt_accesses(stmt) -> list[Access]:
    out = [stmt.output]
    if isinstance(stmt, CaseStmt):
        for arm in stmt.arms:
            out.extend(_rhs_accesses(arm.rhs))
    else:
        out.extend(_rhs_accesses(stmt.rhs))
    return out


def _rhs_accesses(rhs: RhsExpr) -> list[Access]:
    if isinstance(rhs, RhsLeaf):
        return [rhs.access]
    if isinstance(rhs, RhsBinary):
        return _rhs_accesses(rhs.left) + _rhs_accesses(rhs.right)
    return []


def rhs_nodes(rhs: RhsExpr):
    """Post-order traversal of binary nodes."""
    if isinstance(rhs, RhsBinary):
        yield from rhs_nodes(rhs.left)
        yield from rhs_nodes(rhs.right)
        yield rhs


# ---------------------------------------------------------------------------
# Statement analysis (shared by validation, the engine and the dense oracle;
# this is static structure, not evaluation).


class StmtInfo:
    """Derived facts about one executable (lowered) statement."""

    def __init__(self, stmt: EinsumStmt, decls: dict[str, TensorDecl], genvars: tuple[str, ...]):
        self.stmt = stmt
        self.decls = decls
        self.genvars = tuple(genvars)
        self.errors: list[str] = []
        self._analyse()

    def _is_generative_rank(self, decl: TensorDecl, idx: int) -> bool:
        return decl.ranks[idx].shape is None

    def _analyse(self):
        stmt = self.stmt

        # Computed output subscripts: `v` defined by an `v == expr` constraint
        # and not plainly bound anywhere on the RHS.
        rhs_plain: set[str] = set()
        for acc in _rhs_accesses(stmt.rhs):
            for sub in acc.subs:
                if isinstance(sub.expr, RVar):
                    rhs_plain.add(sub.expr.name)
        for rhs in _walk_rhs(stmt.rhs):
            if isinstance(rhs, RhsRankVar):
                rhs_plain.add(rhs.name)

        self.computed: dict[str, RankExpr] = {}
        for sub in stmt.output.subs:
            if not isinstance(sub.expr, RVar) or sub.constraint is None:
                continue
            v = sub.expr.name
            if v in self.genvars or v in rhs_plain:
                continue
            defn = _defining_expr(sub.constraint, v)
            if defn is not None:
                self.computed[v] = defn

        # Canonical variable order: output first, then RHS left to right.
        order: list[str] = []
        seen: set[str] = set()

        def note(names):
            for n in names:
                if n in seen or n in self.genvars or n in self.computed:
                    continue
                seen.add(n)
                order.append(n)

        for sub in stmt.output.subs:
            note(rank_expr_vars(sub.expr))
            if sub.constraint is not None:
                note(cond_vars(sub.constraint))
        for acc in _rhs_accesses(stmt.rhs):
            for sub in acc.subs:
                note(rank_expr_vars(sub.expr))
                if sub.constraint is not None:
                    note(cond_vars(sub.constraint))
        for rhs in _walk_rhs(stmt.rhs):
            if isinstance(rhs, RhsRankVar):
                note([rhs.name])
        self.var_order: tuple[str, ...] = tuple(order)

        # Domains from plain Var bindings; shapes must agree structurally.
        self.domains: dict[str, object] = {}
        self.computed_domains: dict[str, object] = {}

        def bind(var, shape, where):
            target = (
                self.computed_domains if var in self.computed else self.domains
            )
            if var in target:
                if target[var] != shape:
                    self.errors.append(
                        f"rank variable {var!r} is bound to shapes "
                        f"{target[var]!r} and {shape!r}"
                    )
            else:
                target[var] = shape

        def scan_access(acc: Access, is_output: bool):
            decl = self.decls.get(acc.tensor)
            if decl is None:
                return
            if len(acc.subs) != decl.ndim:
                self.errors.append(
                    f"tensor {acc.tensor} has {decl.ndim} ranks but is accessed "
                    f"with {len(acc.subs)} subscripts"
                )
                return
            for idx, sub in enumerate(acc.subs):
                shape = decl.ranks[idx].shape
                gen_rank = shape is None
                expr_vars = set(rank_expr_vars(sub.expr))
                uses_gen = bool(expr_vars & set(self.genvars))
                if gen_rank:
                    ok = isinstance(sub.expr, RConst) or (
                        isinstance(sub.expr, (RVar, ROffset))
                        and _base_var(sub.expr) in self.genvars
                        and 0 <= _gen_delta(sub.expr) <= MAX_GEN_OFFSET
                    )
                    if not ok:
                        self.errors.append(
                            f"tensor {acc.tensor}: generative rank subscript must be "
                            f"a cascade variable plus 0..{MAX_GEN_OFFSET}, or a constant"
                        )
                    continue
                if uses_gen:
                    self.errors.append(
                        f"tensor {acc.tensor}: cascade variable used on the "
                        f"bounded rank {decl.ranks[idx].name}"
                    )
                    continue
                if isinstance(sub.expr, RVar):
                    bind(sub.expr.name, shape, acc.tensor)

        scan_access(stmt.output, True)
        for acc in _rhs_accesses(stmt.rhs):
            scan_access(acc, False)

        for v in self.var_order:
            if v not in self.domains:
                self.errors.append(
                    f"rank variable {v!r} never appears as a plain subscript, "
                    f"so its range is unknown"
                )
        for v in self.computed:
            if v not in self.computed_domains:
                self.errors.append(
                    f"computed output variable {v!r} has no rank to bound it"
                )

        # Global constraints: from every access, regardless of placement.
        self.constraints: list[Cond] = []
        for acc in [stmt.output] + _rhs_accesses(stmt.rhs):
            for sub in acc.subs:
                if sub.constraint is None:
                    continue
                for leaf in _split_and(sub.constraint):
                    if (
                        isinstance(sub.expr, RVar)
                        and sub.expr.name in self.computed
                        and _defining_expr(leaf, sub.expr.name) is not None
                    ):
                        continue  # the defining equality, not a filter
                    self.constraints.append(leaf)

        # Output structure.
        self.out_enumerated: list[str] = []
        for sub in stmt.output.subs:
            for v in rank_expr_vars(sub.expr):
                if (
                    v not in self.genvars
                    and v not in self.computed
                    and v not in self.out_enumerated
                ):
                    self.out_enumerated.append(v)
        rhs_bound = [v for v in self.var_order if v in self.domains]
        self.dropped = [
            v
            for v in rhs_bound
            if v in rhs_plain and v not in set(self.out_enumerated)
        ]

    # -- generation handling ---------------------------------------------------

    def output_generation(self, bindings: dict) -> Optional[int]:
        """Absolute generation the output writes to, None for non-generational."""
        decl = self.decls[self.stmt.output.tensor]
        if not decl.ranks or decl.ranks[0].shape is not None:
            return None
        sub = self.stmt.output.subs[0]
        return eval_rank_expr(sub.expr, bindings)


def _walk_rhs(rhs: RhsExpr):
    yield rhs
    if isinstance(rhs, RhsBinary):
        yield from _walk_rhs(rhs.left)
        yield from _walk_rhs(rhs.right)


def _base_var(e: RankExpr) -> Optional[str]:
    if isinstance(e, RVar):
        return e.name
    if isinstance(e, ROffset):
        return e.name
    return None


def _gen_delta(e: RankExpr) -> int:
    return e.delta if isinstance(e, ROffset) else 0


def _split_and(c: Cond) -> list[Cond]:
    if isinstance(c, CAnd):
        return _split_and(c.left) + _split_and(c.right)
    return [c]


def _defining_expr(c: Cond, var: str) -> Optional[RankExpr]:
    for leaf in _split_and(c):
        if (
            isinstance(leaf, CCompare)
            and leaf.op == "=="
            and isinstance(leaf.left, RVar)
            and leaf.left.name == var
        ):
            return leaf.right
    return None


# ---------------------------------------------------------------------------
# Lowering: sugar expansion and default actions


def desugar_update(stmt: EinsumStmt) -> EinsumStmt:
    """Rewrite ``OUT[g+k, ...] << RHS`` into an update-merge map statement."""
    if not stmt.is_update:
        return stmt
    out = stmt.output
    if not out.subs:
        raise EdgeError("'<<' needs a generational output")
    gsub = out.subs[0].expr
    base = _base_var(gsub)
    delta = _gen_delta(gsub)
    if base is None or delta < 1:
        raise EdgeError(
            "'<<' output must subscript the generative rank with var+k, k >= 1"
        )
    labels = [n.label for n in rhs_nodes(stmt.rhs)]
    label = max(labels, default=0) + 1
    prev = Access(
        out.tensor,
        (Subscript(ROffset(base, delta - 1) if delta > 1 else RVar(base)),)
        + tuple(Subscript(s.expr) for s in out.subs[1:]),
    )
    shared = []
    for s in out.subs[1:]:
        if isinstance(s.expr, RVar):
            shared.append(s.expr.name)
    return EinsumStmt(
        output=Access(out.tensor, tuple(Subscript(s.expr, s.constraint, s.mutable) for s in out.subs)),
        rhs=RhsBinary(label, RhsLeaf(prev), stmt.rhs),
        actions=stmt.actions + (MapAction(label, tuple(shared), "update", "cup"),),
        is_update=False,
        span=stmt.span,
    )


def negate_cond(c: Cond) -> Cond:
    if isinstance(c, CCompare):
        return CCompare(c.left, NEGATED_CMP[c.op], c.right)
    raise EdgeError("only comparison guards can be negated")


def desugar_case(
    stmt: CaseStmt, decls: dict[str, TensorDecl], taken: set[str]
) -> tuple[list[TensorDecl], list[EinsumStmt]]:
    """Expand a case statement into guarded temporaries plus an update chain."""
    out_decl = decls.get(stmt.output.tensor)
    if out_decl is None:
        raise EdgeError(f"case output {stmt.output.tensor} is not declared")
    guards = [arm.guard for arm in stmt.arms if arm.guard is not None]
    n_else = sum(1 for arm in stmt.arms if arm.guard is None)
    if n_else > 1:
        raise EdgeError("a case statement allows at most one 'else' arm")

    new_decls: list[TensorDecl] = []
    new_stmts: list[EinsumStmt] = []
    temp_names: list[str] = []
    for idx, arm in enumerate(stmt.arms, start=1):
        name = f"T{idx}{stmt.output.tensor}"
        while name in decls or name in taken:
            name += "X"
        taken.add(name)
        temp_names.append(name)
        new_decls.append(
            TensorDecl(name, out_decl.ranks, out_decl.dtype, out_decl.empty)
        )
        if arm.guard is not None:
            guard: Optional[Cond] = arm.guard
        else:
            guard = None
            for g in guards:
                neg = negate_cond(g)
                guard = neg if guard is None else CAnd(guard, neg)
        subs = []
        first = True
        for sub in stmt.output.subs:
            if first and guard is not None:
                subs.append(Subscript(sub.expr, guard))
                first = False
            else:
                subs.append(Subscript(sub.expr))
        new_stmts.append(
            EinsumStmt(Access(name, tuple(subs)), arm.rhs, arm.actions, span=stmt.span)
        )

    chain: RhsExpr = RhsLeaf(Access(temp_names[0], tuple(Subscript(s.expr) for s in stmt.output.subs)))
    actions: list[Action] = []
    shared = tuple(
        s.expr.name for s in stmt.output.subs if isinstance(s.expr, RVar)
    )
    for idx, name in enumerate(temp_names[1:], start=1):
        leaf = RhsLeaf(Access(name, tuple(Subscript(s.expr) for s in stmt.output.subs)))
        chain = RhsBinary(idx, chain, leaf)
        actions.append(MapAction(idx, shared, "update", "cup"))
    new_stmts.append(
        EinsumStmt(stmt.output, chain, tuple(actions), span=stmt.span)
    )
    return new_decls, new_stmts


def _shared_plain_ranks(left: RhsExpr, right: RhsExpr) -> tuple[str, ...]:
    def plain(rhs):
        out = []
        for acc in _rhs_accesses(rhs):
            for sub in acc.subs:
                if isinstance(sub.expr, RVar):
                    out.append(sub.expr.name)
        for node in _walk_rhs(rhs):
            if isinstance(node, RhsRankVar):
                out.append(node.name)
        return out

    lvars, rvars = plain(left), set(plain(right))
    seen = set()
    shared = []
    for v in lvars:
        if v in rvars and v not in seen:
            seen.add(v)
            shared.append(v)
    return tuple(shared)


def fill_defaults(stmt: EinsumStmt, info: StmtInfo) -> EinsumStmt:
    """Synthesise the default actions the surface syntax lets one omit."""
    actions = list(stmt.actions)
    mapped = {a.label for a in stmt.maps}
    for node in rhs_nodes(stmt.rhs):
        if node.label not in mapped:
            actions.append(
                MapAction(node.label, _shared_plain_ranks(node.left, node.right), "mul", "pass")
            )
    covered: set[str] = set()
    for red in stmt.reduces:
        covered.update(red.ranks)
    if any(v in covered for v in info.computed):
        # a reduce on a computed target also covers the variables feeding it
        for expr in info.computed.values():
            covered.update(rank_expr_vars(expr))
    leftover = [v for v in info.dropped if v not in covered]
    if leftover and stmt.populate is None:
        actions.append(ReduceAction(None, tuple(leftover), "add", "pass"))
    return replace(stmt, actions=tuple(actions))


def lower(program: Program) -> Program:
    """Return the executable core form of ``program``."""
    decls = dict(program.decl_map())
    taken: set[str] = set()

    def lower_items(items, genvars):
        out = []
        for item in items:
            if isinstance(item, Cascade):
                out.append(
                    Cascade(
                        tuple(lower_items(item.body, genvars + (item.var,))),
                        item.var,
                        item.stop,
                    )
                )
                continue
            if isinstance(item, InitUser):
                out.append(item)
                continue
            if isinstance(item, CaseStmt):
                extra_decls, stmts = desugar_case(item, decls, taken)
                for d in extra_decls:
                    decls[d.name] = d
                for s in stmts:
                    out.extend(lower_items([s], genvars))
                continue
            stmt = desugar_update(item)
            info = StmtInfo(stmt, decls, genvars)
            out.append(fill_defaults(stmt, info))
        return out

    inits = tuple(lower_items(list(program.inits), ()))
    body = Cascade(
        tuple(lower_items(program.body.body, (program.body.var,))),
        program.body.var,
        program.body.stop,
    )
    return Program(tuple(decls.values()), inits, body)


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Diagnostic:
    message: str
    span: object = field(default=None, compare=False)

    def __str__(self):
        if self.span is not None:
            return f"{self.span}: {self.message}"
        return self.message


_DISJOINT_REGIONS = {
    "<": frozenset({"lt"}),
    "<=": frozenset({"lt", "eq"}),
    ">": frozenset({"gt"}),
    ">=": frozenset({"gt", "eq"}),
    "==": frozenset({"eq"}),
    "!=": frozenset({"lt", "gt"}),
}


def _guards_disjoint(a: CCompare, b: CCompare) -> bool:
    if (a.left, a.right) != (b.left, b.right):
        return False
    return not (_DISJOINT_REGIONS[a.op] & _DISJOINT_REGIONS[b.op])


def validate(program: Program, registry: Optional[OperatorRegistry] = None) -> list[Diagnostic]:
    """Check every invariant; an empty result means the program is runnable."""
    registry = registry or builtin_registry()
    diags: list[Diagnostic] = []

    def err(message, span=None):
        diags.append(Diagnostic(message, span))

    decls: dict[str, TensorDecl] = {}
    for d in program.decls:
        if d.name in decls:
            err(f"tensor {d.name} declared twice")
        decls[d.name] = d

    for init in program.inits:
        if isinstance(init, InitUser) and init.tensor not in decls:
            err(f"user tensor {init.tensor} is not declared", init.span)

    # surface checks on case statements
    for stmt, genvars in iter_statements(program):
        if not isinstance(stmt, CaseStmt):
            continue
        guards = [arm.guard for arm in stmt.arms if arm.guard is not None]
        for g in guards:
            if not isinstance(g, CCompare):
                err("case guards must be comparisons", stmt.span)
        comparisons = [g for g in guards if isinstance(g, CCompare)]
        for a, b in itertools.combinations(comparisons, 2):
            if not _guards_disjoint(a, b):
                err(f"case guards overlap: {a} vs {b}", stmt.span)
        if sum(1 for arm in stmt.arms if arm.guard is None) > 1:
            err("more than one 'else' arm", stmt.span)

    try:
        lowered = lower(program)
    except EdgeError as e:
        err(str(e))
        return diags
    ldecls = lowered.decl_map()

    # distinct nested cascade variables
    def check_cascade_vars(c: Cascade, outer: tuple[str, ...]):
        if c.var in outer:
            err(f"nested cascade reuses generative variable {c.var!r}")
        for item in c.body:
            if isinstance(item, Cascade):
                check_cascade_vars(item, outer + (c.var,))

    check_cascade_vars(lowered.body, ())

    # stop conditions
    def check_stop(c: Cascade):
        if c.stop is not None:
            names = (
                [c.stop.tensor]
                if isinstance(c.stop, StopNnzZero)
                else [c.stop.tensor_a, c.stop.tensor_b]
            )
            for name in names:
                d = ldecls.get(name)
                if d is None:
                    err(f"stop condition references undeclared tensor {name}")
                elif not d.ranks or d.ranks[0].shape is not None:
                    err(f"stop condition tensor {name} has no generative rank")
        for item in c.body:
            if isinstance(item, Cascade):
                check_stop(item)

    check_stop(lowered.body)

    # per-statement checks on the lowered form
    def stmt_lists(stmt):
        for acc in stmt_accesses(stmt):
            for sub in acc.subs:
                if sub.constraint is not None:
                    yield from cond_lists(sub.constraint)

    def check_items(items, genvars, where):
        written: dict[tuple, object] = {}
        for item in items:
            if isinstance(item, Cascade):
                check_items(item.body, genvars + (item.var,), f"cascade {item.var}")
                continue
            if isinstance(item, InitUser):
                continue
            stmt: EinsumStmt = item
            for acc in stmt_accesses(stmt):
                if acc.tensor not in ldecls:
                    err(f"tensor {acc.tensor} is not declared", stmt.span)
            if any(acc.tensor not in ldecls for acc in stmt_accesses(stmt)):
                continue

            info = StmtInfo(stmt, ldecls, genvars)
            for msg in info.errors:
                err(msg, stmt.span)

            out = stmt.output
            out_decl = ldecls[out.tensor]
            if out.unary is not None:
                err(f"output access {out.tensor} cannot take a unary operator", stmt.span)

            # SSA per pass: one write per (tensor, generation offset)
            gsub = out.subs[0].expr if out.subs else None
            offset = None
            if out_decl.ranks and out_decl.ranks[0].shape is None and out.subs:
                offset = (
                    gsub.value if isinstance(gsub, RConst) else _gen_delta(gsub)
                )
            key = (out.tensor, offset)
            if key in written:
                err(
                    f"{out.tensor} is assigned twice in one pass (SSA violation)",
                    stmt.span,
                )
            written[key] = stmt

            mutable = [
                (i, s) for i, s in enumerate(out.subs) if s.mutable
            ]
            for acc in _rhs_accesses(stmt.rhs):
                if any(s.mutable for s in acc.subs):
                    err("mutable flags belong on the output access only", stmt.span)

            labels = [n.label for n in rhs_nodes(stmt.rhs)]
            if len(set(labels)) != len(labels):
                err("operation labels must be unique within a statement", stmt.span)
            by_label = {}
            for m in stmt.maps:
                if m.label not in labels:
                    err(f"map action .{m.label} has no matching operation label", stmt.span)
                if m.label in by_label:
                    err(f"two map actions for label .{m.label}", stmt.span)
                by_label[m.label] = m
                if not registry.has_compute(m.compute):
                    err(f"unknown compute operator {m.compute!r}", stmt.span)
                if m.merge not in MERGE_TABLES:
                    err(f"unknown merge operator {m.merge!r}", stmt.span)

            red_seen = set()
            for red in stmt.reduces:
                if red.label is not None and red.label not in labels:
                    err(f"reduce action .{red.label} has no matching operation label", stmt.span)
                if red.label in red_seen:
                    err(f"two reduce actions for label {red.label}", stmt.span)
                red_seen.add(red.label)
                if not registry.has_compute(red.compute):
                    err(f"unknown compute operator {red.compute!r}", stmt.span)
                if red.merge not in MERGE_TABLES:
                    err(f"unknown merge operator {red.merge!r}", stmt.span)
                for rank in red.ranks:
                    if rank in info.out_enumerated:
                        err(
                            f"reduced rank {rank!r} appears in the output",
                            stmt.span,
                        )
                    elif rank not in info.domains and rank not in info.computed:
                        err(f"reduce names unknown rank {rank!r}", stmt.span)

            pop = stmt.populate
            if pop is not None:
                if len(pop.ranks) != 1:
                    err("populate takes exactly one mutable rank", stmt.span)
                mutable_names = {
                    s.expr.name
                    for _, s in mutable
                    if isinstance(s.expr, RVar)
                }
                for rank in pop.ranks:
                    if rank not in mutable_names:
                        err(
                            f"populate rank {rank!r} is not flagged mutable on the output",
                            stmt.span,
                        )
                if not registry.has_compute(pop.compute):
                    err(f"unknown compute operator {pop.compute!r}", stmt.span)
                if not registry.has_coordinate(pop.coord):
                    err(f"unknown coordinate operator {pop.coord!r}", stmt.span)
                else:
                    try:
                        registry.get_coordinate(pop.coord, pop.coord_arg)
                    except EdgeError as e:
                        err(str(e), stmt.span)
            else:
                for _, s in mutable:
                    err(
                        "mutable rank without a populate action",
                        stmt.span,
                    )

            for acc in _rhs_accesses(stmt.rhs):
                if acc.unary is not None and not registry.has_unary(acc.unary):
                    err(f"unknown unary operator {acc.unary!r}", stmt.span)

            # collision coverage for computed output variables
            if info.computed and not stmt.reduces and pop is None:
                err(
                    "computed output subscripts need a reduce action to fold collisions",
                    stmt.span,
                )

    check_items(list(lowered.inits), (), "init")
    check_items(list(lowered.body.body), (lowered.body.var,), "einsum")
    return diags
