"""Execution engine: sparse statement evaluation and cascade driving.

Statements are evaluated relationally.  Each RHS leaf becomes a sparse
relation over the rank variables it binds (or a point-probe for accesses
that are conceptually dense, like complemented tensors); binary nodes
combine relations under their map action's merge table, touching only the
rows the table makes effectual; reduce actions fold rank variables away in
canonical (lexicographic) order; the surviving rows are projected through
the output subscripts and written, either directly or through a populate
fold.  Merge tables whose no-no row is "yes" (pass, nor, nand, ...) force
dense enumeration of the affected variables, guarded by ``RunLimits``.

Generational tensors live in the store as per-generation slices keyed by
absolute generation.  A cascade pass binds its variable to a base
generation; nested cascades start one generation later and fast-forward
their parent, so the paper-style ``i = 0; j = i+1; ...; i = j`` bookkeeping
falls out of the bases.  Stop conditions compare a pass's final output
(offset >= 1) against its entry state (offset 0).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

from . import ast
from .ast import StmtInfo, eval_cond, eval_rank_expr, rank_expr_vars, cond_vars
from .errors import (
    EdgeError,
    EvalError,
    GenerationLimitError,
    IterationLimitError,
    ValidationError,
)
from .fibertree import Tensor, TensorDecl
from .operators import (
    MERGE_TABLES,
    OperatorRegistry,
    builtin_registry,
    coerce_operands,
    coerce_result,
)
from .scalars import DType, cast_value, infer_dtype


@dataclass
class RunLimits:
    max_generations: int = 100_000
    max_points: int = 1_000_000_000

    def __post_init__(self):
        if self.max_generations <= 0 or self.max_points <= 0:
            raise EdgeError("run limits must be positive")


class Store:
    """Run-time state: tensors, generation slices, lists and size bindings."""

    def __init__(self, decls: dict[str, TensorDecl], sizes: dict[str, int], lists: dict[str, list]):
        self.sizes = dict(sizes)
        self.decls = {name: d.resolve(self.sizes) for name, d in decls.items()}
        self.lists = {k: list(v) for k, v in lists.items()}
        self.tensors: dict[str, Tensor] = {}
        self.slices: dict[tuple[str, int], Tensor] = {}

    def is_generational(self, name: str) -> bool:
        decl = self.decls[name]
        return bool(decl.ranks) and decl.ranks[0].shape is None

    def slice_decl(self, name: str) -> TensorDecl:
        decl = self.decls[name]
        if self.is_generational(name):
            return TensorDecl(name, decl.ranks[1:], decl.dtype, decl.empty)
        return decl

    def get_slice(self, name: str, gen: Optional[int]) -> Tensor:
        """The tensor holding ``name``'s data at ``gen``.

        Unwritten slices read as fresh empty tensors and are not retained,
        so the store records exactly the generations that were assigned.
        """
        if self.is_generational(name):
            key = (name, gen)
            if key not in self.slices:
                return Tensor(self.slice_decl(name))
            return self.slices[key]
        if name not in self.tensors:
            self.tensors[name] = Tensor(self.decls[name])
        return self.tensors[name]

    def put_slice(self, name: str, gen: Optional[int], tensor: Tensor) -> None:
        if self.is_generational(name):
            self.slices[(name, gen)] = tensor
        else:
            self.tensors[name] = tensor

    def written_generations(self, name: str) -> list[int]:
        return sorted(g for (n, g) in self.slices if n == name)

    def full_tensor(self, name: str) -> Tensor:
        """Assemble a generational tensor across all written generations."""
        decl = self.decls[name]
        if not self.is_generational(name):
            return self.get_slice(name, None)
        out = Tensor(decl)
        for gen in self.written_generations(name):
            for point, value in self.slices[(name, gen)].iterate_nonempty():
                out.set((gen,) + point, value)
        return out

    def evict_before(self, gen: int) -> None:
        for key in [k for k in self.slices if k[1] < gen]:
            del self.slices[key]


# ---------------------------------------------------------------------------
# Relations


class _Rel:
    __slots__ = ("vars", "rows", "dtype", "empty")

    def __init__(self, vars, rows, dtype, empty):
        self.vars = tuple(vars)
        self.rows = rows  # dict[coord tuple] -> value
        self.dtype = dtype
        self.empty = empty


class _Probe:
    """A point-existence oracle for conceptually dense operands."""

    __slots__ = ("vars", "fn", "dtype", "empty")

    def __init__(self, vars, fn, dtype, empty):
        self.vars = tuple(vars)
        self.fn = fn  # env -> (exists, value)
        self.dtype = dtype
        self.empty = empty


class _Ctx:
    def __init__(self, stmt, info, store, bindings, limits, registry, out_decl):
        self.stmt = stmt
        self.info = info
        self.store = store
        self.bindings = bindings
        self.limits = limits
        self.registry = registry
        self.out_decl = out_decl
        self.var_pos = {v: i for i, v in enumerate(info.var_order)}
        self.domains = {}
        for v in info.var_order:
            self.domains[v] = _resolve_shape(info.domains[v], store)
        self.computed_domains = {
            v: _resolve_shape(s, store) for v, s in info.computed_domains.items()
        }
        self.points = 0

    def charge(self, n: int = 1):
        self.points += n
        if self.points > self.limits.max_points:
            raise IterationLimitError(
                f"statement exceeded {self.limits.max_points} iteration points"
            )

    def ordered(self, names) -> tuple[str, ...]:
        return tuple(sorted(names, key=self.var_pos.__getitem__))


def _resolve_shape(shape, store: Store) -> int:
    if isinstance(shape, str):
        if shape not in store.sizes:
            raise EvalError(f"size parameter |{shape}| is unbound")
        return int(store.sizes[shape])
    if shape is None:
        raise EvalError("an unbounded rank cannot be enumerated")
    return int(shape)


def _dense_product(ctx: _Ctx, names):
    doms = [range(ctx.domains[v]) for v in names]
    total = 1
    for d in doms:
        total *= len(d)
    ctx.charge(total)
    return itertools.product(*doms)


# ---------------------------------------------------------------------------
# Leaf evaluation


def _resolve_access(acc: ast.Access, ctx: _Ctx):
    """Split an access into its backing slice and per-rank subscripts."""
    store = ctx.store
    decl = store.decls[acc.tensor]
    subs = list(acc.subs)
    if store.is_generational(acc.tensor):
        gen = eval_rank_expr(subs[0].expr, ctx.bindings)
        subs = subs[1:]
    else:
        gen = None
    return store.get_slice(acc.tensor, gen), subs


def _leaf_rel(acc: ast.Access, ctx: _Ctx):
    tensor, subs = _resolve_access(acc, ctx)
    dtype, empty = tensor.decl.dtype, tensor.decl.empty
    unary = ctx.registry.get_unary(acc.unary) if acc.unary else None

    names = []
    for sub in subs:
        for v in rank_expr_vars(sub.expr):
            if v not in names and v not in ctx.bindings:
                names.append(v)
    names = ctx.ordered(names)

    complemented = unary is not None and unary.fn(empty) != empty
    hard_exprs = any(
        isinstance(s.expr, (ast.RTernary, ast.RMin, ast.RMax)) for s in subs
    )
    if complemented or hard_exprs:

        def probe(env):
            point = tuple(eval_rank_expr(s.expr, env) for s in subs)
            v = tensor.get(point) if tensor.in_shape(point) else empty
            if unary is not None:
                v = unary.fn(v)
            return v != empty, v

        return _Probe(names, probe, dtype, empty)

    rows: dict[tuple, object] = {}
    for point, value in tensor.iterate_nonempty():
        ctx.charge()
        if unary is not None:
            value = unary.fn(value)
            if value == empty:
                continue
        for env in _solve_subs(subs, point, ctx):
            key = tuple(env[v] for v in names)
            rows[key] = value
    return _Rel(names, rows, dtype, empty)


def _solve_subs(subs, point, ctx: _Ctx):
    """Invert subscript expressions: which variable assignments hit ``point``?"""
    env = dict(ctx.bindings)
    pending = []  # (sum expr, coord)
    for sub, coord in zip(subs, point):
        e = sub.expr
        if isinstance(e, ast.RVar):
            if e.name in env:
                if env[e.name] != coord:
                    return
            else:
                if coord >= ctx.domains[e.name]:
                    return
                env[e.name] = coord
        elif isinstance(e, ast.RConst):
            if e.value != coord:
                return
        elif isinstance(e, ast.ROffset):
            v = coord - e.delta
            if v < 0 or v >= ctx.domains[e.name]:
                return
            if e.name in env:
                if env[e.name] != v:
                    return
            else:
                env[e.name] = v
        elif isinstance(e, ast.RSum):
            pending.append((e, coord))
        else:
            raise EvalError(f"cannot invert subscript {e!r}")

    def expand(i, env):
        if i == len(pending):
            yield env
            return
        e, coord = pending[i]
        a, b = e.left, e.right
        if a in env and b in env:
            if env[a] + env[b] == coord:
                yield from expand(i + 1, env)
            return
        if a in env or b in env:
            known, other = (a, b) if a in env else (b, a)
            v = coord - env[known]
            if 0 <= v < ctx.domains[other]:
                child = dict(env)
                child[other] = v
                yield from expand(i + 1, child)
            return
        for va in range(min(ctx.domains[a], coord + 1)):
            vb = coord - va
            if 0 <= vb < ctx.domains[b]:
                ctx.charge()
                child = dict(env)
                child[a] = va
                child[b] = vb
                yield from expand(i + 1, child)

    yield from expand(0, env)


def _eval_leaf(rhs, ctx: _Ctx):
    if isinstance(rhs, ast.RhsLeaf):
        return _leaf_rel(rhs.access, ctx)
    if isinstance(rhs, ast.RhsRankVar):
        name = rhs.name

        def probe(env):
            return True, env[name]

        return _Probe((name,), probe, DType.INT, None)
    if isinstance(rhs, ast.RhsLit):
        out = ctx.out_decl
        value = cast_value(rhs.value, infer_dtype(rhs.value), None, out.dtype)
        return _Rel((), {(): value}, out.dtype, out.empty)
    raise EvalError(f"bad RHS node {rhs!r}")


# ---------------------------------------------------------------------------
# Merge-driven combination


def _materialize(side, ctx: _Ctx) -> _Rel:
    if isinstance(side, _Rel):
        return side
    rows = {}
    for key in _dense_product(ctx, side.vars):
        env = dict(ctx.bindings)
        env.update(zip(side.vars, key))
        exists, value = side.fn(env)
        if exists:
            rows[key] = value
    return _Rel(side.vars, rows, side.dtype, side.empty)


def _apply_constraints(rel: _Rel, ctx: _Ctx) -> _Rel:
    """Filter by every global constraint whose variables are available."""
    conds = [
        c
        for c in ctx.info.constraints
        if set(cond_vars(c)) - set(ctx.bindings) <= set(rel.vars)
    ]
    if not conds or not rel.rows:
        return rel
    rows = {}
    lists = ctx.store.lists
    for key, value in rel.rows.items():
        env = dict(ctx.bindings)
        env.update(zip(rel.vars, key))
        if all(eval_cond(c, env, lists) for c in conds):
            rows[key] = value
    return _Rel(rel.vars, rows, rel.dtype, rel.empty)


def _combine(action: ast.MapAction, left, right, ctx: _Ctx) -> _Rel:
    table = MERGE_TABLES[action.merge]
    compute = ctx.registry.get_compute(action.compute)
    out = ctx.out_decl
    union_vars = ctx.ordered(set(left.vars) | set(right.vars))

    def emit(rows, env, lv, rv, le, re):
        ctx.charge()
        l2, r2 = coerce_operands(
            lv, left.dtype, left.empty, rv, right.dtype, right.empty, out.dtype
        )
        v = compute.fn(env, l2, r2, le, re)
        if v is None:
            return
        v = coerce_result(v, left.dtype, left.empty, right.dtype, right.empty, out.dtype)
        if v == out.empty:
            return
        rows[tuple(env[x] for x in union_vars)] = v

    rows: dict[tuple, object] = {}

    if table[0]:  # both-absent points exist: enumerate the whole space
        lprobe = _as_lookup(left, ctx)
        rprobe = _as_lookup(right, ctx)
        for key in _dense_product(ctx, union_vars):
            env = dict(ctx.bindings)
            env.update(zip(union_vars, key))
            le, lv = lprobe(env)
            re, rv = rprobe(env)
            if table[(2 if le else 0) + (1 if re else 0)]:
                emit(rows, env, lv if le else left.empty, rv if re else right.empty, le, re)
        return _Rel(union_vars, rows, out.dtype, out.empty)

    need_left_rows = table[2]  # TF: left-only points exist
    need_right_rows = table[1]  # FT
    lrel = _materialize(left, ctx) if (need_left_rows or isinstance(right, _Probe)) and isinstance(left, _Probe) else left
    rrel = _materialize(right, ctx) if need_right_rows and isinstance(right, _Probe) else right

    # matched pairs (TT)
    matched: set[tuple] = set()
    if table[3] or need_left_rows or need_right_rows:
        pairs = _joined_pairs(lrel, rrel, union_vars, ctx)
        for env, lv, rv in pairs:
            key = tuple(env[x] for x in union_vars)
            matched.add(key)
            if table[3]:
                emit(rows, env, lv, rv, True, True)

    if need_left_rows:
        for env, lv in _expanded_rows(lrel, rrel, union_vars, ctx):
            key = tuple(env[x] for x in union_vars)
            if key not in matched:
                emit(rows, env, lv, right.empty, True, False)
    if need_right_rows:
        for env, rv in _expanded_rows(rrel, lrel, union_vars, ctx):
            key = tuple(env[x] for x in union_vars)
            if key not in matched:
                emit(rows, env, left.empty, rv, False, True)
    return _Rel(union_vars, rows, out.dtype, out.empty)


def _as_lookup(side, ctx: _Ctx):
    if isinstance(side, _Probe):
        return side.fn

    def fn(env, _side=side):
        key = tuple(env[v] for v in _side.vars)
        if key in _side.rows:
            return True, _side.rows[key]
        return False, _side.empty

    return fn


def _joined_pairs(left, right, union_vars, ctx: _Ctx):
    """Yield (env, lv, rv) for points where both operands exist."""
    if isinstance(left, _Probe) and isinstance(right, _Probe):
        left = _materialize(left, ctx)
    if isinstance(left, _Probe):
        left, right = right, left
        swapped = True
    else:
        swapped = False

    if isinstance(right, _Probe):
        extra = [v for v in right.vars if v not in left.vars]
        for key, lv in left.rows.items():
            env = dict(ctx.bindings)
            env.update(zip(left.vars, key))
            if extra:
                for combo in _dense_product(ctx, extra):
                    env2 = dict(env)
                    env2.update(zip(extra, combo))
                    ok, rv = right.fn(env2)
                    if ok:
                        yield (env2, rv, lv) if swapped else (env2, lv, rv)
            else:
                ctx.charge()
                ok, rv = right.fn(env)
                if ok:
                    yield (env, rv, lv) if swapped else (env, lv, rv)
        return

    shared = [v for v in left.vars if v in right.vars]
    l_extra = [v for v in left.vars if v not in shared]
    index: dict[tuple, list] = {}
    for rkey, rv in right.rows.items():
        renv = dict(zip(right.vars, rkey))
        skey = tuple(renv[v] for v in shared)
        index.setdefault(skey, []).append((renv, rv))
    for lkey, lv in left.rows.items():
        lenv = dict(zip(left.vars, lkey))
        skey = tuple(lenv[v] for v in shared)
        for renv, rv in index.get(skey, ()):
            ctx.charge()
            env = dict(ctx.bindings)
            env.update(renv)
            env.update(lenv)
            yield (env, rv, lv) if swapped else (env, lv, rv)


def _expanded_rows(side, other, union_vars, ctx: _Ctx):
    """Yield (env, value) for ``side`` rows expanded over ``other``'s extra
    variables, at points where ``other`` does not exist."""
    side = _materialize(side, ctx)
    other_lookup = _as_lookup(other, ctx)
    extra = [v for v in other.vars if v not in side.vars]
    for key, value in side.rows.items():
        env = dict(ctx.bindings)
        env.update(zip(side.vars, key))
        if extra:
            for combo in _dense_product(ctx, extra):
                env2 = dict(env)
                env2.update(zip(extra, combo))
                ok, _ = other_lookup(env2)
                if not ok:
                    yield env2, value
        else:
            ctx.charge()
            ok, _ = other_lookup(env)
            if not ok:
                yield env, value


# ---------------------------------------------------------------------------
# Reduce folding


def _fold(rel: _Rel, action: ast.ReduceAction, ctx: _Ctx) -> _Rel:
    ranks = [r for r in action.ranks if r in rel.vars]
    if not ranks:
        return rel
    table = MERGE_TABLES[action.merge]
    compute = ctx.registry.get_compute(action.compute)
    keep = ctx.ordered(set(rel.vars) - set(ranks))
    keep_idx = [rel.vars.index(v) for v in keep]
    acc: dict[tuple, object] = {}
    for key in sorted(rel.rows):
        ctx.charge()
        value = rel.rows[key]
        newkey = tuple(key[i] for i in keep_idx)
        if newkey in acc:
            if table[3]:
                env = dict(ctx.bindings)
                env.update(zip(rel.vars, key))
                v = compute.fn(env, acc[newkey], value, True, True)
                if v is None or v == rel.empty:
                    del acc[newkey]
                else:
                    acc[newkey] = v
            else:
                del acc[newkey]
        else:
            if table[1]:
                acc[newkey] = value
    return _Rel(keep, acc, rel.dtype, rel.empty)


# ---------------------------------------------------------------------------
# Statement evaluation


def _eval_rhs(rhs, ctx: _Ctx, reduces_by_label):
    if isinstance(rhs, ast.RhsBinary):
        left = _eval_rhs(rhs.left, ctx, reduces_by_label)
        right = _eval_rhs(rhs.right, ctx, reduces_by_label)
        action = ctx.maps_by_label[rhs.label]
        rel = _combine(action, left, right, ctx)
        rel = _apply_constraints(rel, ctx)
        for red in reduces_by_label.get(rhs.label, ()):
            rel = _fold(rel, red, ctx)
        return rel
    leaf = _eval_leaf(rhs, ctx)
    if isinstance(leaf, _Rel):
        leaf = _apply_constraints(leaf, ctx)
    return leaf


def eval_stmt(
    stmt: ast.EinsumStmt,
    store: Store,
    bindings: dict,
    limits: RunLimits,
    registry: OperatorRegistry,
    genvars: tuple[str, ...] = ("i",),
    populate_trace: Optional[list] = None,
) -> Tensor:
    """Evaluate one lowered statement and return the output slice."""
    info = StmtInfo(stmt, store.decls, genvars)
    if info.errors:
        raise EvalError("; ".join(info.errors))
    out_decl = store.slice_decl(stmt.output.tensor)
    ctx = _Ctx(stmt, info, store, bindings, limits, registry, out_decl)
    ctx.maps_by_label = {m.label: m for m in stmt.maps}

    reduces_by_label: dict[int, list] = {}
    top_reduces: list[ast.ReduceAction] = []
    for red in stmt.reduces:
        if red.label is None:
            top_reduces.append(red)
        else:
            reduces_by_label.setdefault(red.label, []).append(red)

    rel = _eval_rhs(stmt.rhs, ctx, reduces_by_label)
    if isinstance(rel, _Probe):
        rel = _materialize(rel, ctx)
        rel = _apply_constraints(rel, ctx)
    for red in top_reduces:
        rel = _fold(rel, red, ctx)

    # Residual reduce ops cover collisions at projection (computed subscripts).
    residual = None
    for red in top_reduces + [r for rs in reduces_by_label.values() for r in rs]:
        if any(r in info.computed for r in red.ranks):
            residual = red
    if residual is None and top_reduces:
        residual = top_reduces[-1]

    return _project(rel, ctx, residual, populate_trace)


def _project(rel: _Rel, ctx: _Ctx, residual, populate_trace) -> Tensor:
    stmt, info, out = ctx.stmt, ctx.info, ctx.out_decl
    store = ctx.store
    result = Tensor(out)
    gen_rank = store.is_generational(stmt.output.tensor)
    out_subs = stmt.output.subs[1:] if gen_rank else stmt.output.subs

    # variables still needed: output subscripts, computed definitions,
    # pending constraints
    needed: list[str] = []

    def note(vs):
        for v in vs:
            if v not in needed and v not in ctx.bindings and v not in info.computed:
                needed.append(v)

    for sub in out_subs:
        note(rank_expr_vars(sub.expr))
    for expr in info.computed.values():
        note(rank_expr_vars(expr))
    pending = [
        c
        for c in info.constraints
        if not set(cond_vars(c)) - set(ctx.bindings) <= set(rel.vars)
    ]
    for c in pending:
        note(cond_vars(c))
    expand = ctx.ordered([v for v in needed if v not in rel.vars])

    mutable_pos = [i for i, s in enumerate(out_subs) if s.mutable]
    pop = stmt.populate
    lists = store.lists

    # Stream rows in canonical order, compute output coordinates.
    events = []
    for key in sorted(rel.rows):
        value = rel.rows[key]
        base_env = dict(ctx.bindings)
        base_env.update(zip(rel.vars, key))
        combos = (
            _dense_product(ctx, expand) if expand else (None,)
        )
        for combo in combos:
            env = dict(base_env)
            if combo is not None:
                env.update(zip(expand, combo))
            ok = True
            for var, expr in info.computed.items():
                coord = eval_rank_expr(expr, env)
                dom = ctx.computed_domains[var]
                if coord < 0 or coord >= dom:
                    raise EvalError(
                        f"computed subscript {var} = {coord} is outside [0, {dom})"
                    )
                env[var] = coord
            for c in pending:
                if not eval_cond(c, env, lists):
                    ok = False
                    break
            if not ok:
                continue
            coords = tuple(eval_rank_expr(s.expr, env) for s in out_subs)
            v = cast_value(value, rel.dtype, rel.empty, out.dtype)
            order_key = tuple(env[v2] for v2 in info.var_order if v2 in env)
            events.append((order_key, coords, v, env))

    events.sort(key=lambda e: e[0])

    if pop is not None:
        mpos = mutable_pos[0]
        coord_op = ctx.registry.get_coordinate(pop.coord, pop.coord_arg)
        compute = ctx.registry.get_compute(pop.compute)
        fibers: dict[tuple, dict] = {}
        for _, coords, v, env in events:
            prefix = coords[:mpos] + coords[mpos + 1 :]
            c = coords[mpos]
            fiber = fibers.setdefault(prefix, {})
            v2 = compute.fn(env, None, v, False, True)
            if v2 is None or v2 == out.empty:
                snapshot = sorted(fiber.items())
            else:
                survivors = coord_op.fn(env, c, v2, sorted(fiber.items()))
                allowed = set(fiber) | {c}
                for sc, _ in survivors:
                    if sc not in allowed:
                        raise EvalError(
                            f"coordinate operator {coord_op.display} produced "
                            f"coordinate {sc} outside the fiber"
                        )
                fiber.clear()
                fiber.update(survivors)
                snapshot = sorted(fiber.items())
            if populate_trace is not None:
                populate_trace.append((prefix, snapshot))
        for prefix, fiber in fibers.items():
            for c, v in fiber.items():
                point = prefix[:mpos] + (c,) + prefix[mpos:]
                if not result.in_shape(point):
                    raise EvalError(f"populate wrote out-of-shape point {point}")
                result.set(point, v)
        return result

    written: dict[tuple, object] = {}
    red_table = MERGE_TABLES[residual.merge] if residual is not None else None
    red_compute = (
        ctx.registry.get_compute(residual.compute) if residual is not None else None
    )
    for _, coords, v, env in events:
        if coords in written:
            if residual is None:
                raise EvalError(
                    f"two values for output point {coords} and no reduce action"
                )
            if red_table[3]:
                nv = red_compute.fn(env, written[coords], v, True, True)
                if nv is None or nv == out.empty:
                    del written[coords]
                else:
                    written[coords] = nv
            else:
                del written[coords]
        else:
            if residual is None or red_table[1]:
                written[coords] = v
    for coords, v in written.items():
        if not result.in_shape(coords):
            raise EvalError(f"output point {coords} is out of shape")
        result.set(coords, v)
    return result


# ---------------------------------------------------------------------------
# Program driving


StmtEvaluator = Callable[..., Tensor]


class _RunState:
    def __init__(self, limits: RunLimits):
        self.limits = limits
        self.passes = 0

    def start_pass(self):
        self.passes += 1
        if self.passes > self.limits.max_generations:
            raise GenerationLimitError(
                f"exceeded {self.limits.max_generations} cascade passes"
            )


def seed_store(program: ast.Program, users: dict[str, Tensor], sizes, lists) -> Store:
    decls = program.decl_map()
    store = Store(decls, sizes or {}, lists or {})
    missing = program.size_params() - set(store.sizes)
    if missing:
        raise EvalError(
            "unbound size parameters: " + ", ".join(sorted(f"|{m}|" for m in missing))
        )
    missing_lists = program.list_names() - set(store.lists)
    if missing_lists:
        raise EvalError("unbound lists: " + ", ".join(sorted(missing_lists)))
    for name in program.user_tensors():
        if name not in users:
            raise EvalError(f"user tensor {name} was not supplied")
    for name, tensor in users.items():
        if name not in store.decls:
            raise EvalError(f"unknown user tensor {name}")
        decl = store.decls[name]
        if tensor.decl.dtype is not decl.dtype:
            raise EvalError(
                f"user tensor {name} has dtype {tensor.decl.dtype}, "
                f"declared {decl.dtype}"
            )
        fresh = Tensor(decl)
        for point, value in tensor.iterate_nonempty():
            fresh.set(point, value)
        store.tensors[name] = fresh
    return store


def run(
    program: ast.Program,
    users: Optional[dict[str, Tensor]] = None,
    sizes: Optional[dict[str, int]] = None,
    lists: Optional[dict[str, list]] = None,
    limits: Optional[RunLimits] = None,
    registry: Optional[OperatorRegistry] = None,
    evict: bool = False,
    evaluator: Optional[StmtEvaluator] = None,
) -> Store:
    """Validate, lower and execute ``program``; returns the final store.

    ``evaluator`` defaults to the sparse engine; the dense oracle's
    statement evaluator can be swapped in for cross-checking.
    """
    registry = registry or builtin_registry()
    limits = limits or RunLimits()
    diags = ast.validate(program, registry)
    if diags:
        raise ValidationError(diags)
    lowered = ast.lower(program)
    store = seed_store(lowered, users or {}, sizes, lists)
    state = _RunState(limits)
    evaluator = evaluator or eval_stmt

    def run_stmt(stmt, bindings, genvars, written):
        out = stmt.output.tensor
        gen = None
        if store.is_generational(out):
            gen = eval_rank_expr(stmt.output.subs[0].expr, bindings)
            if (out, gen) in store.slices:
                raise EvalError(
                    f"{out} generation {gen} is written twice (SSA violation)"
                )
        else:
            if out in written:
                raise EvalError(f"{out} is assigned twice in one pass")
            written.add(out)
        result = evaluator(stmt, store, bindings, limits, registry, genvars)
        store.put_slice(out, gen, result)

    written_init: set[str] = set()
    for item in lowered.inits:
        if isinstance(item, ast.InitUser):
            continue
        run_stmt(item, {}, (), written_init)

    def run_cascade(cascade: ast.Cascade, base: int, outer_bindings: dict, top: bool) -> int:
        while True:
            state.start_pass()
            entry = base
            bindings = dict(outer_bindings)
            bindings[cascade.var] = base
            written: set[str] = set()
            for item in cascade.body:
                if isinstance(item, ast.Cascade):
                    base = run_cascade(item, base + 1, bindings, False)
                    bindings[cascade.var] = base
                else:
                    run_stmt(item, bindings, tuple(bindings), written)
            if cascade.stop is None:
                return base
            if _stop_satisfied(cascade.stop, store, entry, base):
                return base
            base += 1
            if evict and top:
                store.evict_before(entry)

    run_cascade(lowered.body, 0, {}, True)
    return store


def _stop_satisfied(stop, store: Store, entry: int, end: int) -> bool:
    def resolve(offset: int) -> int:
        return entry if offset == 0 else end + offset

    if isinstance(stop, ast.StopNnzZero):
        return store.get_slice(stop.tensor, resolve(stop.offset)).occupancy() == 0
    a = store.get_slice(stop.tensor_a, resolve(stop.offset_a))
    b = store.get_slice(stop.tensor_b, resolve(stop.offset_b))
    return a.equals(b)
