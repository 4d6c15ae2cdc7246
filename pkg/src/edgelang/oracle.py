"""Independent ground truth.

``dense_eval_stmt`` evaluates one statement by walking the *entire*
iteration space point by point, exactly as the operational reading of an
Einsum prescribes: project into every operand, consult the merge table on
the existence bits, compute, fold reductions in enumeration order, and
populate the output.  It shares the operator registry and the casting rules
with the engine, and nothing else; there is no culling and no join logic
here, which is the point.

The second half holds classical graph algorithms (queue BFS, Dijkstra,
Bellman-Ford, union-find components) used to validate the bundled programs
end to end.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass

from . import ast
from .ast import StmtInfo, eval_cond, eval_rank_expr, rank_expr_vars, cond_vars
from .errors import EvalError, IterationLimitError
from .fibertree import RankDecl, Tensor, TensorDecl
from .operators import MERGE_TABLES, coerce_operands, coerce_result
from .scalars import DType, INF, cast_value


# ---------------------------------------------------------------------------
# Dense statement evaluation


def dense_eval_stmt(
    stmt: ast.EinsumStmt,
    store,
    bindings: dict,
    limits,
    registry,
    genvars: tuple[str, ...] = ("i",),
    populate_trace=None,
) -> Tensor:
    """Literal full-space evaluation of one lowered statement."""
    info = StmtInfo(stmt, store.decls, genvars)
    if info.errors:
        raise EvalError("; ".join(info.errors))
    out_decl = store.slice_decl(stmt.output.tensor)
    cap = limits.max_points

    domains = {v: _shape_of(info.domains[v], store) for v in info.var_order}
    computed_domains = {
        v: _shape_of(s, store) for v, s in info.computed_domains.items()
    }
    lists = store.lists

    maps_by_label = {m.label: m for m in stmt.maps}
    node_reduces: dict[int, list] = {}
    top_reduces: list[ast.ReduceAction] = []
    for red in stmt.reduces:
        if red.label is None:
            top_reduces.append(red)
        else:
            node_reduces.setdefault(red.label, []).append(red)

    # Evaluate the RHS tree bottom-up into dense tables keyed by variable
    # tuples; every table remembers which variables it still carries.
    def leaf_value(rhs, env):
        if isinstance(rhs, ast.RhsRankVar):
            return True, env[rhs.name], DType.INT, None
        if isinstance(rhs, ast.RhsLit):
            v = cast_value(
                rhs.value, _lit_dtype(rhs.value), None, out_decl.dtype
            )
            return True, v, out_decl.dtype, out_decl.empty
        acc = rhs.access
        decl = store.decls[acc.tensor]
        subs = list(acc.subs)
        gen = None
        if store.is_generational(acc.tensor):
            gen = eval_rank_expr(subs[0].expr, env)
            subs = subs[1:]
        tensor = store.get_slice(acc.tensor, gen)
        point = tuple(eval_rank_expr(s.expr, env) for s in subs)
        value = tensor.get(point) if tensor.in_shape(point) else tensor.empty
        if acc.unary is not None:
            value = registry.get_unary(acc.unary).fn(value)
        return value != tensor.empty, value, tensor.decl.dtype, tensor.decl.empty

    class Node:
        """A materialised dense table for one RHS subtree."""

        def __init__(self, rhs):
            self.rhs = rhs
            if isinstance(rhs, ast.RhsBinary):
                self.left = Node(rhs.left)
                self.right = Node(rhs.right)
                self.vars = _ordered(
                    set(self.left.vars) | set(self.right.vars), info
                )
                self.dtype, self.empty = out_decl.dtype, out_decl.empty
            else:
                self.left = self.right = None
                self.vars = _ordered(_leaf_vars(rhs, bindings), info)
                self.dtype = self.empty = None  # set while evaluating
            self.table: dict = {}
            self.folded = self.vars

        def evaluate(self):
            if self.left is not None:
                self.left.evaluate()
                self.right.evaluate()
            count = 1
            for v in self.vars:
                count *= domains[v]
            if count > cap:
                raise IterationLimitError(
                    f"dense oracle iteration space exceeds {cap} points"
                )
            action = None
            if isinstance(self.rhs, ast.RhsBinary):
                action = maps_by_label[self.rhs.label]
                compute = registry.get_compute(action.compute)
                table = MERGE_TABLES[action.merge]
            for combo in itertools.product(*(range(domains[v]) for v in self.vars)):
                env = dict(bindings)
                env.update(zip(self.vars, combo))
                if not _constraints_ok(info, env, lists, self.vars, bindings):
                    continue
                if action is None:
                    exists, value, dtype, empty = leaf_value(self.rhs, env)
                    self.dtype, self.empty = dtype, empty
                    if exists:
                        self.table[combo] = value
                    continue
                le, lv = self.left.lookup(env)
                re, rv = self.right.lookup(env)
                if not table[(2 if le else 0) + (1 if re else 0)]:
                    continue
                l2, r2 = coerce_operands(
                    lv, self.left.dtype, self.left.empty,
                    rv, self.right.dtype, self.right.empty, out_decl.dtype,
                )
                v = compute.fn(env, l2, r2, le, re)
                if v is None:
                    continue
                v = coerce_result(
                    v, self.left.dtype, self.left.empty,
                    self.right.dtype, self.right.empty, out_decl.dtype,
                )
                if v == out_decl.empty:
                    continue
                self.table[combo] = v
            if self.dtype is None:
                self.dtype, self.empty = _leaf_meta(self.rhs, store, out_decl)
            if isinstance(self.rhs, ast.RhsBinary):
                for red in node_reduces.get(self.rhs.label, ()):
                    self.fold(red)

        def fold(self, red: ast.ReduceAction):
            ranks = [r for r in red.ranks if r in self.folded]
            if not ranks:
                return
            table = MERGE_TABLES[red.merge]
            compute = registry.get_compute(red.compute)
            keep = _ordered(set(self.folded) - set(ranks), info)
            keep_idx = [self.folded.index(v) for v in keep]
            acc: dict = {}
            for combo in sorted(self.table):
                value = self.table[combo]
                newkey = tuple(combo[i] for i in keep_idx)
                if newkey in acc:
                    if table[3]:
                        env = dict(bindings)
                        env.update(zip(self.folded, combo))
                        v = compute.fn(env, acc[newkey], value, True, True)
                        if v is None or v == self.empty:
                            del acc[newkey]
                        else:
                            acc[newkey] = v
                    else:
                        del acc[newkey]
                else:
                    if table[1]:
                        acc[newkey] = value
            self.folded = keep
            self.table = acc

        def lookup(self, env):
            key = tuple(env[v] for v in self.folded)
            if key in self.table:
                return True, self.table[key]
            return False, self.empty

    top = Node(stmt.rhs)
    top.evaluate()
    for red in top_reduces:
        top.fold(red)

    residual = None
    for red in stmt.reduces:
        if any(r in info.computed for r in red.ranks):
            residual = red
    if residual is None and top_reduces:
        residual = top_reduces[-1]

    # Projection over the remaining variables plus any output-only ones.
    remaining = list(top.folded)
    extra = [
        v
        for v in info.var_order
        if v not in remaining
        and (
            v in _output_needed_vars(stmt, info, store)
            or any(
                v in cond_vars(c)
                for c in info.constraints
                if not set(cond_vars(c)) - set(bindings) <= set(remaining)
            )
        )
    ]
    stream_vars = _ordered(set(remaining) | set(extra), info)

    gen_rank = store.is_generational(stmt.output.tensor)
    out_subs = stmt.output.subs[1:] if gen_rank else stmt.output.subs
    result = Tensor(out_decl)
    pop = stmt.populate

    count = 1
    for v in stream_vars:
        count *= domains[v]
    if count > cap:
        raise IterationLimitError(f"dense oracle iteration space exceeds {cap} points")

    written: dict = {}
    fibers: dict = {}
    mpos = None
    if pop is not None:
        mpos = next(i for i, s in enumerate(out_subs) if s.mutable)
        coord_op = registry.get_coordinate(pop.coord, pop.coord_arg)
        pop_compute = registry.get_compute(pop.compute)
    if residual is not None:
        red_table = MERGE_TABLES[residual.merge]
        red_compute = registry.get_compute(residual.compute)

    for combo in itertools.product(*(range(domains[v]) for v in stream_vars)):
        env = dict(bindings)
        env.update(zip(stream_vars, combo))
        exists, value = top.lookup(env)
        if not exists:
            continue
        ok = True
        for var, expr in info.computed.items():
            coord = eval_rank_expr(expr, env)
            dom = computed_domains[var]
            if coord < 0 or coord >= dom:
                raise EvalError(
                    f"computed subscript {var} = {coord} is outside [0, {dom})"
                )
            env[var] = coord
        if not _constraints_ok(info, env, lists, stream_vars, bindings, full=True):
            continue
        coords = tuple(eval_rank_expr(s.expr, env) for s in out_subs)
        v = cast_value(value, top.dtype, top.empty, out_decl.dtype)

        if pop is not None:
            prefix = coords[:mpos] + coords[mpos + 1 :]
            c = coords[mpos]
            fiber = fibers.setdefault(prefix, {})
            v2 = pop_compute.fn(env, None, v, False, True)
            if v2 is not None and v2 != out_decl.empty:
                survivors = coord_op.fn(env, c, v2, sorted(fiber.items()))
                allowed = set(fiber) | {c}
                for sc, _ in survivors:
                    if sc not in allowed:
                        raise EvalError(
                            f"coordinate operator produced foreign coordinate {sc}"
                        )
                fiber.clear()
                fiber.update(survivors)
            if populate_trace is not None:
                populate_trace.append((prefix, sorted(fiber.items())))
            continue

        if coords in written:
            if residual is None:
                raise EvalError(
                    f"two values for output point {coords} and no reduce action"
                )
            if red_table[3]:
                nv = red_compute.fn(env, written[coords], v, True, True)
                if nv is None or nv == out_decl.empty:
                    del written[coords]
                else:
                    written[coords] = nv
            else:
                del written[coords]
        else:
            if residual is None or red_table[1]:
                written[coords] = v

    if pop is not None:
        for prefix, fiber in fibers.items():
            for c, v in fiber.items():
                point = prefix[:mpos] + (c,) + prefix[mpos:]
                result.set(point, v)
        return result
    for coords, v in written.items():
        if not result.in_shape(coords):
            raise EvalError(f"output point {coords} is out of shape")
        result.set(coords, v)
    return result


def _shape_of(shape, store) -> int:
    if isinstance(shape, str):
        return int(store.sizes[shape])
    if shape is None:
        raise EvalError("an unbounded rank cannot be enumerated")
    return int(shape)


def _lit_dtype(v):
    if isinstance(v, bool):
        return DType.BOOL
    if isinstance(v, float) and v not in (INF, -INF):
        return DType.FLOAT
    return DType.INT


def _ordered(names, info: StmtInfo):
    pos = {v: i for i, v in enumerate(info.var_order)}
    return tuple(sorted(names, key=pos.__getitem__))


def _leaf_vars(rhs, bindings):
    if isinstance(rhs, ast.RhsRankVar):
        return {rhs.name}
    if isinstance(rhs, ast.RhsLit):
        return set()
    names = set()
    for sub in rhs.access.subs:
        for v in rank_expr_vars(sub.expr):
            if v not in bindings:
                names.add(v)
    return names


def _leaf_meta(rhs, store, out_decl):
    if isinstance(rhs, ast.RhsRankVar):
        return DType.INT, None
    if isinstance(rhs, ast.RhsLit):
        return out_decl.dtype, out_decl.empty
    decl = store.decls[rhs.access.tensor]
    return decl.dtype, decl.empty


def _constraints_ok(info, env, lists, have_vars, bindings, full=False):
    have = set(have_vars) | set(bindings) | set(info.computed)
    for c in info.constraints:
        vs = set(cond_vars(c))
        if not vs <= have:
            continue
        if not full and not vs <= set(have_vars) | set(bindings):
            continue
        if not eval_cond(c, env, lists):
            return False
    return True


def _output_needed_vars(stmt, info, store):
    gen_rank = store.is_generational(stmt.output.tensor)
    out_subs = stmt.output.subs[1:] if gen_rank else stmt.output.subs
    needed = set()
    for sub in out_subs:
        needed.update(rank_expr_vars(sub.expr))
    for expr in info.computed.values():
        needed.update(rank_expr_vars(expr))
    return needed - set(info.computed)


# ---------------------------------------------------------------------------
# Classical graph oracles


@dataclass(frozen=True)
class Graph:
    """A directed, weighted edge list over vertices 0..n-1."""

    n: int
    edges: tuple[tuple[int, int, object], ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))
        for s, d, _ in self.edges:
            if not (0 <= s < self.n and 0 <= d < self.n):
                raise EvalError(f"edge ({s}, {d}) out of range for n={self.n}")

    def adjacency(self) -> dict[int, list[tuple[int, object]]]:
        adj: dict[int, list] = {v: [] for v in range(self.n)}
        for s, d, w in self.edges:
            adj[s].append((d, w))
        return adj

    def to_tensor(self, name="G", dtype=DType.INT, empty=0,
                  s_rank="S", d_rank="D") -> Tensor:
        decl = TensorDecl(
            name,
            (RankDecl(s_rank, self.n), RankDecl(d_rank, self.n)),
            dtype,
            empty,
        )
        t = Tensor(decl)
        for s, d, w in self.edges:
            t.set((s, d), w)
        return t

    def symmetrized(self) -> "Graph":
        seen = {}
        for s, d, w in self.edges:
            seen.setdefault((s, d), w)
            seen.setdefault((d, s), w)
        return Graph(self.n, tuple((s, d, w) for (s, d), w in sorted(seen.items())))


def tensor_to_graph(t: Tensor) -> Graph:
    n = max(r.shape for r in t.decl.ranks)
    return Graph(n, tuple((p[0], p[1], v) for p, v in t.iterate_nonempty()))


def bfs_oracle(g: Graph, sources) -> dict[int, int]:
    """Depth of every vertex reachable from ``sources`` (standard queue BFS)."""
    sources = list(sources)
    if not sources:
        raise EvalError("BFS needs at least one source")
    adj = g.adjacency()
    depth = {s: 0 for s in sources}
    queue = deque(sources)
    while queue:
        v = queue.popleft()
        for d, _ in adj[v]:
            if d not in depth:
                depth[d] = depth[v] + 1
                queue.append(d)
    return depth


def sssp_oracle(g: Graph, source: int, method: str = "dijkstra") -> dict[int, object]:
    """Exact shortest distances from ``source``; unreachable vertices absent."""
    if method == "dijkstra":
        for _, _, w in g.edges:
            if w < 0:
                raise EvalError("Dijkstra needs non-negative weights")
        adj = g.adjacency()
        dist = {source: 0}
        heap = [(0, source)]
        done = set()
        while heap:
            d, v = heapq.heappop(heap)
            if v in done:
                continue
            done.add(v)
            for u, w in adj[v]:
                nd = d + w
                if u not in dist or nd < dist[u]:
                    dist[u] = nd
                    heapq.heappush(heap, (nd, u))
        return dist
    if method == "bellman-ford":
        dist = {source: 0}
        for _ in range(g.n):
            changed = False
            for s, d, w in g.edges:
                if s in dist and (d not in dist or dist[s] + w < dist[d]):
                    dist[d] = dist[s] + w
                    changed = True
            if not changed:
                return dist
        raise EvalError("negative cycle reachable from the source")
    raise EvalError(f"unknown SSSP method {method!r}")


def cc_oracle(g: Graph) -> dict[int, int]:
    """Connected components treating edges as undirected; labels are the
    smallest vertex id in each component."""
    parent = list(range(g.n))

    def find(v):
        root = v
        while parent[root] != root:
            root = parent[root]
        while parent[v] != root:
            parent[v], v = root, parent[v]
        return root

    for s, d, _ in g.edges:
        rs, rd = find(s), find(d)
        if rs != rd:
            parent[max(rs, rd)] = min(rs, rd)
    return {v: find(v) for v in range(g.n)}


def partitions_equal(a: dict[int, int], b: dict[int, int]) -> bool:
    """Do two labelings induce the same equivalence classes?"""
    if set(a) != set(b):
        raise EvalError("partition domains differ")

    def canon(m):
        first: dict = {}
        out = {}
        for v in sorted(m):
            out[v] = first.setdefault(m[v], v)
        return out

    return canon(a) == canon(b)
