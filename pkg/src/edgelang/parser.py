"""Concrete syntax: lexer, parser and pretty-printer.

A program has three sections::

    tensors { G[S=|V|, D=|V|]: int, empty=0; ... }
    init    { G = user;  F[0, s in id] = 0; ... }
    einsum  { T[i, d] = G[s, d] .1 F[i, s] :: map.1(s; add; cap) ...;
              until nnz(F[i+1]) == 0; }

Tensor names start uppercase, rank variables are lowercase; that one
convention keeps the grammar LL(2).  Parsing recovers at the next ``;`` and
reports all diagnostics; ``parse`` returns ``(program_or_None, diagnostics)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import ast
from .ast import Diagnostic
from .fibertree import RankDecl, TensorDecl
from .scalars import INF, DType

KEYWORDS = {
    "tensors", "init", "einsum", "cascade", "until", "nnz", "case", "else",
    "user", "in", "and", "map", "reduce", "populate", "int", "float", "bool",
    "empty", "true", "false", "inf", "min", "max",
}

PUNCT = [
    "::", "==", "!=", "<=", ">=", "<<", "=>", "{", "}", "[", "]", "(", ")",
    ",", ";", ":", "=", "<", ">", "+", "-", "*", "?", ".", "|",
]


@dataclass(frozen=True)
class SourceSpan:
    path: str
    line: int  # 1-based
    col: int  # 1-based
    length: int = 1

    def __str__(self):
        return f"{self.path}:{self.line}:{self.col}"


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT, INT, FLOAT, KW, punct literal, EOF
    text: str
    span: SourceSpan

    @property
    def value(self):
        if self.kind == "INT":
            return int(self.text)
        if self.kind == "FLOAT":
            return float(self.text)
        return self.text


class ParseFailure(Exception):
    pass


def tokenize(text: str, path: str = "<string>") -> tuple[list[Token], list[Diagnostic]]:
    tokens: list[Token] = []
    diags: list[Diagnostic] = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        span = SourceSpan(path, line, col)
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            isfloat = False
            if j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit():
                isfloat = True
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    isfloat = True
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            word = text[i:j]
            tokens.append(
                Token("FLOAT" if isfloat else "INT", word, SourceSpan(path, line, col, j - i))
            )
            col += j - i
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            kind = "KW" if word in KEYWORDS else "IDENT"
            tokens.append(Token(kind, word, SourceSpan(path, line, col, j - i)))
            col += j - i
            i = j
            continue
        for p in PUNCT:
            if text.startswith(p, i):
                tokens.append(Token(p, p, SourceSpan(path, line, col, len(p))))
                i += len(p)
                col += len(p)
                break
        else:
            diags.append(Diagnostic(f"unexpected character {c!r}", span))
            i += 1
            col += 1
    tokens.append(Token("EOF", "", SourceSpan(path, line, col, 0)))
    return tokens, diags


class _Parser:
    def __init__(self, tokens: list[Token], diags: list[Diagnostic]):
        self.tokens = tokens
        self.pos = 0
        self.diags = diags

    # -- token plumbing -------------------------------------------------------

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.peek()
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def at(self, kind: str, text: Optional[str] = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)

    def accept(self, kind: str, text: Optional[str] = None) -> Optional[Token]:
        if self.at(kind, text):
            return self.next()
        return None

    def expect(self, kind: str, text: Optional[str] = None, what: str = "") -> Token:
        tok = self.peek()
        if self.at(kind, text):
            return self.next()
        expected = text or what or kind
        self.error(f"expected {expected!r}, found {tok.text or tok.kind!r}", tok.span)

    def error(self, message: str, span: SourceSpan):
        self.diags.append(Diagnostic(message, span))
        raise ParseFailure()

    def sync_to_semi(self):
        depth = 0
        while not self.at("EOF"):
            tok = self.peek()
            if tok.kind == "{":
                depth += 1
            elif tok.kind == "}":
                if depth == 0:
                    return
                depth -= 1
            elif tok.kind == ";" and depth == 0:
                self.next()
                return
            self.next()

    # -- sections ---------------------------------------------------------------

    def program(self) -> Optional[ast.Program]:
        try:
            self.expect("KW", "tensors")
            self.expect("{")
            decls = []
            while not self.accept("}"):
                if self.at("EOF"):
                    self.error("unterminated tensors section", self.peek().span)
                try:
                    decls.append(self.decl())
                except ParseFailure:
                    self.sync_to_semi()
            self.expect("KW", "init")
            self.expect("{")
            inits = []
            while not self.accept("}"):
                if self.at("EOF"):
                    self.error("unterminated init section", self.peek().span)
                try:
                    inits.append(self.init_item())
                except ParseFailure:
                    self.sync_to_semi()
            self.expect("KW", "einsum")
            self.expect("{")
            body = self.cascade_body("i")
            self.expect("}")
            self.expect("EOF", what="end of program")
            return ast.Program(tuple(decls), tuple(inits), body)
        except ParseFailure:
            return None

    def decl(self) -> TensorDecl:
        name = self.tensor_name()
        ranks = []
        self.expect("[")
        if not self.at("]"):
            while True:
                rtok = self.expect("IDENT", what="rank name")
                rname = rtok.text
                if not rname[0].isupper():
                    self.error("rank names are uppercase", rtok.span)
                shape = None
                if self.accept("="):
                    if self.accept("|"):
                        shape = self.expect("IDENT", what="size parameter").text
                        self.expect("|")
                    else:
                        stok = self.expect("INT", what="rank shape")
                        shape = int(stok.text)
                        if shape <= 0:
                            self.error("rank shapes are positive", stok.span)
                ranks.append(RankDecl(rname, shape))
                if not self.accept(","):
                    break
        self.expect("]")
        self.expect(":")
        dtype_tok = self.expect("KW", what="datatype")
        if dtype_tok.text not in ("int", "float", "bool"):
            self.error(f"unknown datatype {dtype_tok.text!r}", dtype_tok.span)
        dtype = DType(dtype_tok.text)
        self.expect(",")
        self.expect("KW", "empty")
        self.expect("=")
        empty = self.literal()
        self.expect(";")
        try:
            return TensorDecl(name, tuple(ranks), dtype, empty)
        except Exception as e:
            self.error(str(e), dtype_tok.span)

    def literal(self):
        neg = bool(self.accept("-"))
        tok = self.next()
        if tok.kind == "INT":
            v = int(tok.text)
            return -v if neg else v
        if tok.kind == "FLOAT":
            v = float(tok.text)
            return -v if neg else v
        if tok.kind == "KW" and tok.text == "inf":
            return -INF if neg else INF
        if tok.kind == "KW" and tok.text in ("true", "false") and not neg:
            return tok.text == "true"
        self.error(f"expected a literal, found {tok.text!r}", tok.span)

    def tensor_name(self) -> str:
        tok = self.expect("IDENT", what="tensor name")
        if not tok.text[0].isupper():
            self.error(
                f"tensor names start uppercase ({tok.text!r} looks like a rank variable)",
                tok.span,
            )
        return tok.text

    def init_item(self):
        if self.at("IDENT") and self.peek(1).kind == "=" and self.peek(2).kind == "KW" \
                and self.peek(2).text == "user":
            tok = self.next()
            self.next()
            self.next()
            self.expect(";")
            return ast.InitUser(tok.text, span=tok.span)
        return self.statement()

    def cascade_body(self, var: str) -> ast.Cascade:
        items = []
        stop = None
        while not self.at("}"):
            if self.at("EOF"):
                self.error("unterminated block", self.peek().span)
            try:
                if self.at("KW", "cascade"):
                    self.next()
                    sub_var = self.expect("IDENT", what="cascade variable").text
                    self.expect("{")
                    sub = self.cascade_body(sub_var)
                    self.expect("}")
                    items.append(sub)
                elif self.at("KW", "until"):
                    span = self.next().span
                    stop = self.stop_cond(var)
                    self.expect(";")
                    if not self.at("}"):
                        self.error("'until' must close its cascade", self.peek().span)
                else:
                    items.append(self.statement())
            except ParseFailure:
                self.sync_to_semi()
        return ast.Cascade(tuple(items), var, stop)

    def stop_cond(self, var: str):
        if self.accept("KW", "nnz"):
            self.expect("(")
            tensor = self.tensor_name()
            offset = self.gen_ref(var)
            self.expect(")")
            self.expect("==")
            zero = self.expect("INT")
            if int(zero.text) != 0:
                self.error("occupancy stop compares against 0", zero.span)
            return ast.StopNnzZero(tensor, offset)
        tensor_a = self.tensor_name()
        offset_a = self.gen_ref(var)
        self.expect("==")
        tensor_b = self.tensor_name()
        offset_b = self.gen_ref(var)
        return ast.StopEqual(tensor_a, offset_a, tensor_b, offset_b)

    def gen_ref(self, var: str) -> int:
        self.expect("[")
        tok = self.expect("IDENT", what="generative variable")
        if tok.text != var:
            self.error(
                f"stop condition uses {tok.text!r}, but this cascade iterates {var!r}",
                tok.span,
            )
        offset = 0
        if self.accept("+"):
            offset = int(self.expect("INT").text)
        self.expect("]")
        return offset

    # -- statements ---------------------------------------------------------------

    def statement(self):
        output = self.access(allow_mutable=True)
        span = self.peek().span
        if self.accept("<<"):
            rhs, actions = self.rhs_with_actions()
            self.expect(";")
            return ast.EinsumStmt(output, rhs, actions, is_update=True, span=span)
        self.expect("=")
        if self.at("KW", "case"):
            self.next()
            self.expect("{")
            arms = []
            while not self.accept("}"):
                if self.at("EOF"):
                    self.error("unterminated case", self.peek().span)
                if self.accept("KW", "else"):
                    guard = None
                else:
                    guard = self.cond()
                self.expect("=>")
                rhs, actions = self.rhs_with_actions()
                self.expect(";")
                arms.append(ast.CaseArm(guard, rhs, actions))
            self.expect(";")
            return ast.CaseStmt(output, tuple(arms), span=span)
        rhs, actions = self.rhs_with_actions()
        self.expect(";")
        return ast.EinsumStmt(output, rhs, actions, span=span)

    def rhs_with_actions(self):
        rhs = self.rhs_expr()
        actions = []
        if self.accept("::"):
            while self.at("KW", "map") or self.at("KW", "reduce") or self.at("KW", "populate"):
                actions.append(self.action())
            if not actions:
                self.error("expected at least one action after '::'", self.peek().span)
        return rhs, tuple(actions)

    def rhs_expr(self) -> ast.RhsExpr:
        left = self.operand()
        if self.at("."):
            label = self.label()
            right = self.operand()
            return ast.RhsBinary(label, left, right)
        return left

    def label(self) -> int:
        self.expect(".")
        return int(self.expect("INT", what="operation label").text)

    def operand(self) -> ast.RhsExpr:
        if self.accept("("):
            inner = self.rhs_expr()
            self.expect(")")
            if not isinstance(inner, ast.RhsBinary):
                self.error("parentheses must wrap a binary operation", self.peek().span)
            return inner
        tok = self.peek()
        if tok.kind in ("INT", "FLOAT") or (
            tok.kind == "KW" and tok.text in ("true", "false", "inf")
        ) or tok.kind == "-":
            return ast.RhsLit(self.literal())
        if tok.kind == "IDENT":
            if tok.text[0].isupper():
                return ast.RhsLeaf(self.access())
            if self.peek(1).kind == "(":
                unary = self.next().text
                self.expect("(")
                acc = self.access()
                self.expect(")")
                return ast.RhsLeaf(ast.Access(acc.tensor, acc.subs, unary))
            self.next()
            return ast.RhsRankVar(tok.text)
        self.error(f"expected an operand, found {tok.text or tok.kind!r}", tok.span)

    def access(self, allow_mutable: bool = False) -> ast.Access:
        name = self.tensor_name()
        subs = []
        if self.accept("["):
            while True:
                subs.append(self.subscript(allow_mutable))
                if not self.accept(","):
                    break
            self.expect("]")
        return ast.Access(name, tuple(subs))

    def subscript(self, allow_mutable: bool) -> ast.Subscript:
        expr = self.rank_expr()
        mutable = False
        if self.accept("*"):
            if not allow_mutable:
                self.error("mutable flags belong on the output access", self.peek().span)
            mutable = True
        constraint = None
        if self.accept("KW", "in"):
            if not isinstance(expr, ast.RVar):
                self.error("'in' constraints apply to plain rank variables", self.peek().span)
            listname = self.expect("IDENT", what="list name").text
            constraint = ast.CInList(expr.name, listname)
        elif self.accept(":"):
            constraint = self.cond()
        return ast.Subscript(expr, constraint, mutable)

    def rank_expr(self) -> ast.RankExpr:
        if self.accept("("):
            cond = self.cond()
            self.expect("?")
            then = self.rank_expr()
            self.expect(":")
            other = self.rank_expr()
            self.expect(")")
            return ast.RTernary(cond, then, other)
        if self.at("KW", "min") or self.at("KW", "max"):
            kw = self.next().text
            self.expect("(")
            a = self.expect("IDENT", what="rank variable").text
            self.expect(",")
            b = self.expect("IDENT", what="rank variable").text
            self.expect(")")
            return ast.RMin(a, b) if kw == "min" else ast.RMax(a, b)
        if self.at("INT"):
            return ast.RConst(int(self.next().text))
        tok = self.expect("IDENT", what="rank variable")
        if self.accept("+"):
            if self.at("INT"):
                return ast.ROffset(tok.text, int(self.next().text))
            other = self.expect("IDENT", what="rank variable").text
            return ast.RSum(tok.text, other)
        if self.at("-") and self.peek(1).kind == "INT":
            self.next()
            return ast.ROffset(tok.text, -int(self.next().text))
        return ast.RVar(tok.text)

    def cond(self) -> ast.Cond:
        left = self.cond_atom()
        while self.accept("KW", "and"):
            right = self.cond_atom()
            left = ast.CAnd(left, right)
        return left

    def cond_atom(self) -> ast.Cond:
        if self.at("IDENT") and self.peek(1).kind == "KW" and self.peek(1).text == "in":
            var = self.next().text
            self.next()
            listname = self.expect("IDENT", what="list name").text
            return ast.CInList(var, listname)
        left = self.rank_expr()
        tok = self.peek()
        if tok.kind not in ("<", "<=", ">", ">=", "==", "!="):
            self.error(f"expected a comparison, found {tok.text!r}", tok.span)
        op = self.next().text
        right = self.rank_expr()
        return ast.CCompare(left, op, right)

    # -- actions ---------------------------------------------------------------------

    def action(self) -> ast.Action:
        kw = self.next().text
        if kw == "map":
            label = self.label()
            self.expect("(")
            ranks = self.rank_list()
            self.expect(";")
            compute = self.op_name()
            merge = "pass"
            if self.accept(";"):
                merge = self.op_name()
            self.expect(")")
            return ast.MapAction(label, ranks, compute, merge)
        if kw == "reduce":
            label = None
            if self.at("."):
                label = self.label()
            self.expect("(")
            ranks = self.rank_list()
            self.expect(";")
            compute = self.op_name()
            merge = "pass"
            if self.accept(";"):
                merge = self.op_name()
            self.expect(")")
            return ast.ReduceAction(label, ranks, compute, merge)
        # populate
        self.expect("(")
        ranks = []
        while True:
            ranks.append(self.expect("IDENT", what="mutable rank").text)
            self.expect("*")
            if not self.accept(","):
                break
        self.expect(";")
        compute = self.op_name()
        coord, coord_arg = "pass", None
        if self.accept(";"):
            coord = self.op_name()
            if self.accept("("):
                coord_arg = int(self.expect("INT", what="count").text)
                self.expect(")")
        self.expect(")")
        return ast.PopulateAction(tuple(ranks), compute, coord, coord_arg)

    def op_name(self) -> str:
        tok = self.peek()
        if tok.kind == "IDENT" or (
            tok.kind == "KW"
            and tok.text in ("min", "max", "and", "in", "map", "reduce", "populate")
        ):
            self.next()
            return tok.text
        self.error(f"expected an operator name, found {tok.text!r}", tok.span)

    def rank_list(self) -> tuple[str, ...]:
        ranks = [self.expect("IDENT", what="rank variable").text]
        while self.accept(","):
            ranks.append(self.expect("IDENT", what="rank variable").text)
        return tuple(ranks)


def parse(text: str, path: str = "<string>") -> tuple[Optional[ast.Program], list[Diagnostic]]:
    """Parse EDGE source text; returns (program-or-None, diagnostics)."""
    tokens, diags = tokenize(text, path)
    if diags:
        return None, diags
    parser = _Parser(tokens, diags)
    program = parser.program()
    if parser.diags:
        return None, parser.diags
    return program, []


def parse_or_raise(text: str, path: str = "<string>") -> ast.Program:
    program, diags = parse(text, path)
    if program is None:
        raise ParseFailure("; ".join(str(d) for d in diags))
    return program


# ---------------------------------------------------------------------------
# Pretty-printing (canonical form; parse(pretty_print(p)) == p structurally)


def _fmt_shape(shape) -> str:
    if shape is None:
        return ""
    if isinstance(shape, str):
        return f"=|{shape}|"
    return f"={shape}"


def _fmt_rank_expr(e: ast.RankExpr) -> str:
    if isinstance(e, ast.RVar):
        return e.name
    if isinstance(e, ast.RConst):
        return str(e.value)
    if isinstance(e, ast.ROffset):
        return f"{e.name}+{e.delta}" if e.delta >= 0 else f"{e.name}-{-e.delta}"
    if isinstance(e, ast.RSum):
        return f"{e.left}+{e.right}"
    if isinstance(e, ast.RMin):
        return f"min({e.left}, {e.right})"
    if isinstance(e, ast.RMax):
        return f"max({e.left}, {e.right})"
    if isinstance(e, ast.RTernary):
        return f"({_fmt_cond(e.cond)} ? {_fmt_rank_expr(e.then)} : {_fmt_rank_expr(e.other)})"
    raise TypeError(e)


def _fmt_cond(c: ast.Cond) -> str:
    if isinstance(c, ast.CCompare):
        return f"{_fmt_rank_expr(c.left)} {c.op} {_fmt_rank_expr(c.right)}"
    if isinstance(c, ast.CInList):
        return f"{c.var} in {c.listname}"
    if isinstance(c, ast.CAnd):
        return f"{_fmt_cond(c.left)} and {_fmt_cond(c.right)}"
    raise TypeError(c)


def _fmt_sub(s: ast.Subscript) -> str:
    out = _fmt_rank_expr(s.expr)
    if s.mutable:
        out += "*"
    if s.constraint is not None:
        if (
            isinstance(s.constraint, ast.CInList)
            and isinstance(s.expr, ast.RVar)
            and s.constraint.var == s.expr.name
        ):
            return f"{out} in {s.constraint.listname}"
        return f"{out}: {_fmt_cond(s.constraint)}"
    return out


def _fmt_access(a: ast.Access) -> str:
    subs = f"[{', '.join(_fmt_sub(s) for s in a.subs)}]" if a.subs else ""
    body = f"{a.tensor}{subs}"
    if a.unary is not None:
        return f"{a.unary}({body})"
    return body


def _fmt_lit(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float) and v == INF:
        return "inf"
    if isinstance(v, float) and v == -INF:
        return "-inf"
    return repr(v) if isinstance(v, float) else str(v)


def _fmt_rhs(e: ast.RhsExpr, top: bool = True) -> str:
    if isinstance(e, ast.RhsLeaf):
        return _fmt_access(e.access)
    if isinstance(e, ast.RhsRankVar):
        return e.name
    if isinstance(e, ast.RhsLit):
        return _fmt_lit(e.value)
    if isinstance(e, ast.RhsBinary):
        left = _fmt_rhs(e.left, top=False)
        right = _fmt_rhs(e.right, top=False)
        body = f"{left} .{e.label} {right}"
        return body if top else f"({body})"
    raise TypeError(e)


def _fmt_action(a: ast.Action) -> str:
    if isinstance(a, ast.MapAction):
        tail = f"; {a.merge}" if a.merge != "pass" else ""
        return f"map.{a.label}({', '.join(a.ranks)}; {a.compute}{tail})"
    if isinstance(a, ast.ReduceAction):
        label = f".{a.label}" if a.label is not None else ""
        tail = f"; {a.merge}" if a.merge != "pass" else ""
        return f"reduce{label}({', '.join(a.ranks)}; {a.compute}{tail})"
    if isinstance(a, ast.PopulateAction):
        ranks = ", ".join(f"{r}*" for r in a.ranks)
        coord = a.coord if a.coord_arg is None else f"{a.coord}({a.coord_arg})"
        tail = f"; {coord}" if (a.coord, a.coord_arg) != ("pass", None) else ""
        return f"populate({ranks}; {a.compute}{tail})"
    raise TypeError(a)


def _fmt_rhs_actions(rhs, actions) -> str:
    text = _fmt_rhs(rhs)
    if actions:
        text += " :: " + " ".join(_fmt_action(a) for a in actions)
    return text


def _fmt_stmt(stmt, indent: str) -> list[str]:
    if isinstance(stmt, ast.CaseStmt):
        lines = [f"{indent}{_fmt_access(stmt.output)} = case {{"]
        for arm in stmt.arms:
            guard = "else" if arm.guard is None else _fmt_cond(arm.guard)
            lines.append(f"{indent}  {guard} => {_fmt_rhs_actions(arm.rhs, arm.actions)};")
        lines.append(f"{indent}}};")
        return lines
    op = "<<" if stmt.is_update else "="
    return [f"{indent}{_fmt_access(stmt.output)} {op} {_fmt_rhs_actions(stmt.rhs, stmt.actions)};"]


def _fmt_stop(stop, var: str, indent: str) -> str:
    def ref(offset):
        return f"[{var}+{offset}]" if offset else f"[{var}]"

    if isinstance(stop, ast.StopNnzZero):
        return f"{indent}until nnz({stop.tensor}{ref(stop.offset)}) == 0;"
    return (
        f"{indent}until {stop.tensor_a}{ref(stop.offset_a)} == "
        f"{stop.tensor_b}{ref(stop.offset_b)};"
    )


def _fmt_cascade_items(c: ast.Cascade, indent: str) -> list[str]:
    lines = []
    for item in c.body:
        if isinstance(item, ast.Cascade):
            lines.append(f"{indent}cascade {item.var} {{")
            lines.extend(_fmt_cascade_items(item, indent + "  "))
            lines.append(f"{indent}}}")
        else:
            lines.extend(_fmt_stmt(item, indent))
    if c.stop is not None:
        lines.append(_fmt_stop(c.stop, c.var, indent))
    return lines


def pretty_print(program: ast.Program) -> str:
    lines = ["tensors {"]
    for d in program.decls:
        ranks = ", ".join(f"{r.name}{_fmt_shape(r.shape)}" for r in d.ranks)
        lines.append(
            f"  {d.name}[{ranks}]: {d.dtype}, empty={_fmt_lit(d.empty)};"
        )
    lines.append("}")
    lines.append("init {")
    for init in program.inits:
        if isinstance(init, ast.InitUser):
            lines.append(f"  {init.tensor} = user;")
        else:
            lines.extend(_fmt_stmt(init, "  "))
    lines.append("}")
    lines.append("einsum {")
    lines.extend(_fmt_cascade_items(program.body, "  "))
    lines.append("}")
    return "\n".join(lines) + "\n"
