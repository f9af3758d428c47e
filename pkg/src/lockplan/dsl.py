"""Transaction-template DSL: parsing, validation, pretty-printing.

Templates are stored-procedure-style chains of keyed table operations.  The
static analysis downstream is table-level, so keys stay opaque expressions
over parameters and earlier op outputs.

Grammar (one file per workload; `#` starts a comment):

    Table <Name> population=<int>
    Transaction <Name>(<p1>, <p2>, ...) [dynamic]:
        [<var> =] Read|Write|Insert|Delete(<Table>, <key_expr>) [commutes=<label>] [may_abort]
        if <param>: <ops...> [else: <ops...>]
        for <var> in <list_param> [max=<int>]: <ops...>

Design rules:
 - Conditionals expand into one execution path per branch combination
   ("supergraph"); the analyzer must hold for every path simultaneously.
 - Bounded loops expand to their max count at parse time; runtime instances
   with fewer iterations skip the extra ops but keep the plan's lock points.
 - A key expression is `name` or `name.field` where name is a parameter, the
   loop variable, or the output variable of a strictly earlier op; data
   dependence is therefore acyclic by construction.
 - Commutativity is declared, never inferred: two writes conflict unless both
   carry the same `commutes=` label.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import product

DEFAULT_LOOP_MAX = 20


class DslError(ValueError):
    """Parse or validation failure, carrying a 1-based source line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


# --------------------------------------------------------------------------
# Data model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TableRef:
    name: str
    population: int


class OpKind(Enum):
    READ = "read"
    WRITE = "write"
    INSERT = "insert"
    DELETE = "delete"

    @property
    def is_write(self) -> bool:
        # Inserts and deletes take exclusive locks like writes.
        return self is not OpKind.READ


@dataclass(frozen=True)
class KeyExpr:
    """Opaque key: a parameter, a loop element, or an earlier op's output.

    Exactly one resolution applies:
      * ``param`` set, ``index`` None  — direct parameter value
      * ``param`` and ``index`` set    — element of a list parameter (loop)
      * ``op_index`` set               — field of an earlier op's output row
    ``var``/``field`` keep the source spelling for printing.
    """

    var: str
    field: str | None = None
    param: str | None = None
    index: int | None = None
    op_index: int | None = None

    @property
    def depends_on_op(self) -> int | None:
        return self.op_index

    @property
    def dispatch_resolvable(self) -> bool:
        return self.op_index is None

    def text(self) -> str:
        return f"{self.var}.{self.field}" if self.field else self.var

    def canonical(self) -> str:
        """Injective spelling: loop elements carry their iteration index."""
        base = f"{self.param}[{self.index}]" if self.index is not None else self.var
        return f"{base}.{self.field}" if self.field else base


@dataclass(frozen=True)
class LoopInfo:
    loop_id: int
    var: str
    param: str
    iteration: int
    max_count: int


@dataclass(frozen=True)
class TemplateOp:
    index: int
    kind: OpKind
    table: TableRef
    key: KeyExpr
    out_var: str | None = None
    commutes: str | None = None
    may_abort: bool = False
    loop: LoopInfo | None = None
    branch: tuple[tuple[str, bool], ...] = ()


class TxnKind(Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class TemplatePath:
    path_id: int
    conditions: tuple[tuple[str, bool], ...]
    ops: tuple[TemplateOp, ...]


@dataclass(frozen=True)
class TransactionTemplate:
    name: str
    params: tuple[str, ...]
    kind: TxnKind
    paths: tuple[TemplatePath, ...]
    source_ops: tuple[TemplateOp, ...] = field(default=(), compare=False)

    @property
    def ops(self) -> tuple[TemplateOp, ...]:
        if len(self.paths) != 1:
            raise ValueError(f"template {self.name} has {len(self.paths)} paths")
        return self.paths[0].ops


@dataclass(frozen=True)
class Workload:
    tables: tuple[TableRef, ...]
    templates: tuple[TransactionTemplate, ...]

    @property
    def schema(self) -> dict[str, TableRef]:
        return {t.name: t for t in self.tables}


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_TABLE_RE = re.compile(r"^Table\s+(\w+)\s+population\s*=\s*(\d+)$")
_TXN_RE = re.compile(r"^Transaction\s+(\w+)\s*\(([^)]*)\)\s*(dynamic)?\s*:$")
_OP_RE = re.compile(
    r"^(?:(\w+)\s*=\s*)?(Read|Write|Insert|Delete)\s*"
    r"\(\s*(\w+)\s*,\s*(\w+(?:\.\w+)?)\s*\)\s*(.*)$"
)
_FOR_RE = re.compile(r"^for\s+(\w+)\s+in\s+(\w+)(?:\s+max\s*=\s*(\d+))?\s*:$")
_IF_RE = re.compile(r"^if\s+(\w+)\s*:$")
_KEY_RE = re.compile(r"^(\w+)(?:\.(\w+))?$")


@dataclass
class _Line:
    indent: int
    text: str
    number: int


def _logical_lines(source: str) -> list[_Line]:
    out = []
    for number, raw in enumerate(source.splitlines(), start=1):
        text = raw.split("#", 1)[0].rstrip()
        if not text.strip():
            continue
        indent = len(text) - len(text.lstrip())
        out.append(_Line(indent, text.strip(), number))
    return out


class _TemplateBuilder:
    """Accumulates ops for one template, expanding loops and branch tags."""

    def __init__(self, name: str, params: tuple[str, ...], tables: dict[str, TableRef]):
        self.name = name
        self.params = params
        self.tables = tables
        self.ops: list[TemplateOp] = []
        self.out_vars: dict[str, int] = {}  # var -> producing op index
        self.loop_counter = 0
        self.branch_params: list[str] = []

    def _key_expr(
        self, text: str, line: int, loop: tuple[str, str, int] | None
    ) -> KeyExpr:
        m = _KEY_RE.match(text)
        if not m:
            raise DslError(f"bad key expression {text!r}", line)
        var, fld = m.group(1), m.group(2)
        if loop and var == loop[0]:
            return KeyExpr(var, fld, param=loop[1], index=loop[2])
        if var in self.params:
            return KeyExpr(var, fld, param=var)
        if var in self.out_vars:
            return KeyExpr(var, fld, op_index=self.out_vars[var])
        raise DslError(f"unknown variable {var!r} in key expression", line)

    def add_op(
        self,
        line: _Line,
        branch: tuple[tuple[str, bool], ...],
        loop: tuple[str, str, int] | None = None,
        loop_info: LoopInfo | None = None,
    ) -> None:
        m = _OP_RE.match(line.text)
        if not m:
            raise DslError(f"bad operation syntax: {line.text!r}", line.number)
        out_var, kind_s, table_s, key_s, suffix = m.groups()
        if table_s not in self.tables:
            raise DslError(f"undeclared table {table_s!r}", line.number)
        commutes = None
        may_abort = False
        for token in suffix.split():
            if token == "may_abort":
                may_abort = True
            elif token.startswith("commutes="):
                commutes = token.split("=", 1)[1]
            else:
                raise DslError(f"unknown op annotation {token!r}", line.number)
        kind = OpKind[kind_s.upper()]
        key = self._key_expr(key_s, line.number, loop)
        index = len(self.ops)
        self.ops.append(
            TemplateOp(
                index=index,
                kind=kind,
                table=self.tables[table_s],
                key=key,
                out_var=out_var,
                commutes=commutes,
                may_abort=may_abort,
                loop=loop_info,
                branch=branch,
            )
        )
        if out_var:
            # Loop-local outputs rebind per iteration; elsewhere shadowing is
            # almost certainly a bug in the workload file.
            if out_var in self.out_vars and loop is None:
                raise DslError(f"output variable {out_var!r} redefined", line.number)
            if out_var in self.params:
                raise DslError(f"output variable {out_var!r} shadows a parameter", line.number)
            self.out_vars[out_var] = index

    def add_loop(
        self, header: _Line, body: list[_Line], branch: tuple[tuple[str, bool], ...]
    ) -> None:
        m = _FOR_RE.match(header.text)
        if not m:
            raise DslError(f"bad for syntax: {header.text!r}", header.number)
        var, param, max_s = m.groups()
        if param not in self.params:
            raise DslError(f"loop parameter {param!r} is not a template parameter", header.number)
        max_count = int(max_s) if max_s else DEFAULT_LOOP_MAX
        if max_count < 1:
            raise DslError("loop max must be >= 1", header.number)
        loop_id = self.loop_counter
        self.loop_counter += 1
        for iteration in range(max_count):
            saved = dict(self.out_vars)
            info_proto = LoopInfo(loop_id, var, param, iteration, max_count)
            for line in body:
                for sub in (_FOR_RE, _IF_RE):
                    if sub.match(line.text):
                        raise DslError("nested blocks inside a loop are unsupported", line.number)
                self.add_op(line, branch, loop=(var, param, iteration), loop_info=info_proto)
            # Outputs defined inside an iteration do not leak to later code.
            self.out_vars = saved

    def build(self, kind: TxnKind) -> TransactionTemplate:
        if not self.ops:
            raise DslError(f"template {self.name} has no operations")
        paths = []
        combos = list(product([True, False], repeat=len(self.branch_params))) or [()]
        for path_id, combo in enumerate(combos):
            assignment = dict(zip(self.branch_params, combo))
            conditions = tuple(sorted(assignment.items()))
            ops = []
            remap: dict[int, int] = {}
            for op in self.ops:
                if all(assignment.get(p, v) == v for p, v in op.branch):
                    remap[op.index] = len(ops)
                    key = op.key
                    if key.op_index is not None:
                        if key.op_index not in remap:
                            raise DslError(
                                f"key of op {op.index} in {self.name} references an op "
                                f"from another branch"
                            )
                        key = replace(key, op_index=remap[key.op_index])
                    ops.append(replace(op, index=len(ops), key=key))
            paths.append(TemplatePath(path_id, conditions, tuple(ops)))
        return TransactionTemplate(
            name=self.name,
            params=self.params,
            kind=kind,
            paths=tuple(paths),
            source_ops=tuple(self.ops),
        )


def parse_workload(source: str) -> Workload:
    """Parse a workload file into tables and templates.

    Raises DslError with the offending source line on any syntax problem,
    undeclared table, or key expression referencing an unknown variable.
    """
    lines = _logical_lines(source)
    tables: dict[str, TableRef] = {}
    templates: list[TransactionTemplate] = []
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.indent != 0:
            raise DslError(f"unexpected indentation: {line.text!r}", line.number)
        if m := _TABLE_RE.match(line.text):
            name, pop = m.group(1), int(m.group(2))
            if name in tables:
                raise DslError(f"duplicate table {name!r}", line.number)
            if pop < 1:
                raise DslError("population must be >= 1", line.number)
            tables[name] = TableRef(name, pop)
            i += 1
        elif m := _TXN_RE.match(line.text):
            name = m.group(1)
            if any(t.name == name for t in templates):
                raise DslError(f"duplicate template {name!r}", line.number)
            params = tuple(p.strip() for p in m.group(2).split(",") if p.strip())
            kind = TxnKind.DYNAMIC if m.group(3) else TxnKind.STATIC
            body, i = _take_block(lines, i + 1, line.indent)
            if not body:
                raise DslError(f"template {name} has an empty body", line.number)
            builder = _TemplateBuilder(name, params, tables)
            _parse_body(builder, body)
            templates.append(builder.build(kind))
        else:
            raise DslError(f"expected Table or Transaction, got {line.text!r}", line.number)
    return Workload(tuple(tables.values()), tuple(templates))


def _take_block(lines: list[_Line], start: int, parent_indent: int) -> tuple[list[_Line], int]:
    block = []
    i = start
    body_indent = None
    while i < len(lines) and lines[i].indent > parent_indent:
        if body_indent is None:
            body_indent = lines[i].indent
        block.append(lines[i])
        i += 1
    return block, i


def _parse_body(builder: _TemplateBuilder, body: list[_Line]) -> None:
    base = body[0].indent
    i = 0
    while i < len(body):
        line = body[i]
        if line.indent != base:
            raise DslError(f"unexpected indentation: {line.text!r}", line.number)
        if _FOR_RE.match(line.text):
            inner, i = _take_block(body, i + 1, base)
            if not inner:
                raise DslError("empty loop body", line.number)
            builder.add_loop(line, inner, branch=())
            continue
        if m := _IF_RE.match(line.text):
            param = m.group(1)
            if param not in builder.params:
                raise DslError(f"condition {param!r} is not a template parameter", line.number)
            if param in builder.branch_params:
                raise DslError(f"condition on {param!r} used twice", line.number)
            builder.branch_params.append(param)
            then_body, i = _take_block(body, i + 1, base)
            if not then_body:
                raise DslError("empty if body", line.number)
            for inner in then_body:
                if _FOR_RE.match(inner.text) or _IF_RE.match(inner.text):
                    raise DslError("nested blocks inside if are unsupported", inner.number)
                builder.add_op(inner, branch=((param, True),))
            if i < len(body) and body[i].indent == base and body[i].text == "else:":
                else_body, i = _take_block(body, i + 1, base)
                if not else_body:
                    raise DslError("empty else body", body[i - 1].number)
                for inner in else_body:
                    if _FOR_RE.match(inner.text) or _IF_RE.match(inner.text):
                        raise DslError("nested blocks inside else are unsupported", inner.number)
                    builder.add_op(inner, branch=((param, False),))
            continue
        if line.text == "else:":
            raise DslError("else without if", line.number)
        builder.add_op(line, branch=())
        i += 1


# --------------------------------------------------------------------------
# Spec-level helpers
# --------------------------------------------------------------------------


def parse_templates(source: str) -> list[TransactionTemplate]:
    """Parse a workload file and return just its templates."""
    return list(parse_workload(source).templates)


def validate_schema(
    templates: list[TransactionTemplate], schema: list[TableRef]
) -> list[tuple[str, int, str]]:
    """Check every op's table against the schema.

    Returns a list of (template name, op index, reason); empty means ok.
    """
    by_name = {t.name: t for t in schema}
    errors = []
    for template in templates:
        for path in template.paths:
            for op in path.ops:
                declared = by_name.get(op.table.name)
                if declared is None:
                    errors.append((template.name, op.index, f"table {op.table.name!r} not in schema"))
                elif declared.population < 1:
                    errors.append((template.name, op.index, f"table {op.table.name!r} population < 1"))
    return errors


# --------------------------------------------------------------------------
# Pretty-printing (canonical text; parse(pretty_print(w)) == w)
# --------------------------------------------------------------------------


def _op_line(op: TemplateOp) -> str:
    parts = []
    if op.out_var:
        parts.append(f"{op.out_var} = ")
    parts.append(f"{op.kind.name.title()}({op.table.name}, {op.key.text()})")
    if op.commutes:
        parts.append(f" commutes={op.commutes}")
    if op.may_abort:
        parts.append(" may_abort")
    return "".join(parts)


def pretty_print(template: TransactionTemplate) -> str:
    out = []
    dyn = " dynamic" if template.kind is TxnKind.DYNAMIC else ""
    out.append(f"Transaction {template.name}({', '.join(template.params)}){dyn}:")
    ops = list(template.source_ops or (template.paths[0].ops if len(template.paths) == 1 else ()))
    if not ops:
        raise ValueError(f"template {template.name} has no printable source ops")
    i = 0
    current_branch: tuple[tuple[str, bool], ...] = ()
    while i < len(ops):
        op = ops[i]
        if op.loop is not None:
            loop = op.loop
            body = [o for o in ops[i:] if o.loop and o.loop.loop_id == loop.loop_id]
            first_iter = [o for o in body if o.loop.iteration == 0]
            out.append(f"    for {loop.var} in {loop.param} max={loop.max_count}:")
            for o in first_iter:
                out.append(f"        {_op_line(o)}")
            i += len(body)
            current_branch = ()
            continue
        if op.branch != current_branch:
            if op.branch:
                param, positive = op.branch[0]
                out.append(f"    {'if ' + param if positive else 'else'}:")
            current_branch = op.branch
        indent = "        " if op.branch else "    "
        out.append(f"{indent}{_op_line(op)}")
        i += 1
    return "\n".join(out) + "\n"


def pretty_print_workload(workload: Workload) -> str:
    chunks = [f"Table {t.name} population={t.population}" for t in workload.tables]
    text = "\n".join(chunks) + "\n"
    for template in workload.templates:
        text += "\n" + pretty_print(template)
    return text
