"""Line-oriented mini-language: integer assignments and print statements.

The accepted grammar is documented in grammar.ebnf at the repository root;
the parser here must match it exactly. Execution is deterministic, total
(a step limit bounds every run), and touches no filesystem, network, or
clock state.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

KEYWORD_PRINT = "print"
DEFAULT_STEP_LIMIT = 10_000
MAX_NESTING_DEPTH = 64  # parenthesis/unary depth cap keeps evaluation stack-safe
MAX_VALUE = 10**15  # magnitude cap; repeated squaring must not eat the machine


class ExecStatus(str, Enum):
    NO_CODE = "NO_CODE"
    PARSE_ERROR = "PARSE_ERROR"
    RUNTIME_ERROR = "RUNTIME_ERROR"
    OK = "OK"


@dataclass(frozen=True)
class ExecResult:
    status: ExecStatus
    output: str = ""
    error_detail: str = ""
    steps: int = 0


@dataclass(frozen=True)
class Program:
    source: str


class _ParseError(Exception):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class _RuntimeFault(Exception):
    def __init__(self, message: str):
        super().__init__(message)


# ---------------------------------------------------------------------------
# lexer
# ---------------------------------------------------------------------------

_PUNCT = {"+", "-", "*", "/", "(", ")", "="}


def _lex_line(line: str, line_no: int) -> List[Tuple[str, str]]:
    toks: List[Tuple[str, str]] = []
    i = 0
    n = len(line)
    while i < n:
        ch = line[i]
        if ch in " \t":
            i += 1
            continue
        if ch in _PUNCT:
            toks.append(("punct", ch))
            i += 1
            continue
        if ch.isdigit():
            j = i
            while j < n and line[j].isdigit():
                j += 1
            toks.append(("int", line[i:j]))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (line[j].isalnum() or line[j] == "_"):
                j += 1
            toks.append(("ident", line[i:j]))
            i = j
            continue
        raise _ParseError(line_no, f"unexpected character {ch!r}")
    return toks


# ---------------------------------------------------------------------------
# parser (recursive descent producing tuple AST nodes)
# ---------------------------------------------------------------------------


class _LineParser:
    def __init__(self, toks: List[Tuple[str, str]], line_no: int):
        self.toks = toks
        self.pos = 0
        self.line_no = line_no
        self.depth = 0

    def _enter(self):
        self.depth += 1
        if self.depth > MAX_NESTING_DEPTH:
            raise _ParseError(self.line_no, "expression nested too deeply")

    def _leave(self):
        self.depth -= 1

    def peek(self) -> Optional[Tuple[str, str]]:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def next(self) -> Tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise _ParseError(self.line_no, "unexpected end of line")
        self.pos += 1
        return tok

    def expect(self, kind: str, value: Optional[str] = None) -> Tuple[str, str]:
        tok = self.next()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            raise _ParseError(self.line_no, f"expected {want!r}, got {tok[1]!r}")
        return tok

    def statement(self):
        tok = self.peek()
        if tok is None:
            return None
        if tok == ("ident", KEYWORD_PRINT):
            self.next()
            self.expect("punct", "(")
            node = self.expr()
            self.expect("punct", ")")
            self._end()
            return ("print", node)
        if tok[0] == "ident":
            name = self.next()[1]
            self.expect("punct", "=")
            node = self.expr()
            self._end()
            return ("assign", name, node)
        raise _ParseError(self.line_no, f"statement cannot start with {tok[1]!r}")

    def _end(self):
        tok = self.peek()
        if tok is not None:
            raise _ParseError(self.line_no, f"trailing input {tok[1]!r}")

    def expr(self):
        # chains are flat n-ary nodes so long sums evaluate iteratively
        first = self.term()
        rest = []
        while True:
            tok = self.peek()
            if tok in (("punct", "+"), ("punct", "-")):
                op = self.next()[1]
                rest.append((op, self.term()))
            else:
                break
        return ("chain", first, rest) if rest else first

    def term(self):
        first = self.factor()
        rest = []
        while True:
            tok = self.peek()
            if tok in (("punct", "*"), ("punct", "/")):
                op = self.next()[1]
                rest.append((op, self.factor()))
            else:
                break
        return ("chain", first, rest) if rest else first

    def factor(self):
        negs = 0
        while self.peek() == ("punct", "-"):
            self.next()
            negs += 1
        node = self.atom()
        return ("neg", node) if negs % 2 else (("pos", node) if negs else node)

    def atom(self):
        tok = self.next()
        if tok[0] == "int":
            return ("int", int(tok[1]))
        if tok[0] == "ident":
            if tok[1] == KEYWORD_PRINT:
                raise _ParseError(self.line_no, "'print' is a keyword, not a value")
            return ("var", tok[1])
        if tok == ("punct", "("):
            self._enter()
            node = self.expr()
            self._leave()
            self.expect("punct", ")")
            return node
        raise _ParseError(self.line_no, f"unexpected token {tok[1]!r}")


def parse(source: str):
    """Parse program source into a statement list; raises on grammar violations."""
    stmts = []
    for line_no, line in enumerate(source.split("\n"), start=1):
        toks = _lex_line(line, line_no)
        if not toks:
            continue
        parser = _LineParser(toks, line_no)
        stmt = parser.statement()
        if stmt is not None:
            stmts.append(stmt)
    return stmts


# ---------------------------------------------------------------------------
# interpreter
# ---------------------------------------------------------------------------


class _Interp:
    def __init__(self, step_limit: int):
        self.step_limit = step_limit
        self.steps = 0
        self.env: dict = {}
        self.printed: List[str] = []

    def tick(self):
        self.steps += 1
        if self.steps > self.step_limit:
            raise _RuntimeFault("step limit exceeded")

    def eval(self, node) -> int:
        self.tick()
        kind = node[0]
        if kind == "int":
            return node[1]
        if kind == "var":
            name = node[1]
            if name not in self.env:
                raise _RuntimeFault(f"undefined identifier '{name}'")
            return self.env[name]
        if kind == "neg":
            return -self.eval(node[1])
        if kind == "pos":
            return self.eval(node[1])
        if kind == "chain":
            acc = self.eval(node[1])
            for op, operand in node[2]:
                self.tick()
                val = self.eval(operand)
                if op == "+":
                    acc = acc + val
                elif op == "-":
                    acc = acc - val
                elif op == "*":
                    acc = acc * val
                else:
                    if val == 0:
                        raise _RuntimeFault("division by zero")
                    acc = acc // val
                if acc > MAX_VALUE or acc < -MAX_VALUE:
                    raise _RuntimeFault("value overflow")
            return acc
        raise _RuntimeFault(f"bad node {kind!r}")

    def run(self, stmts) -> None:
        for stmt in stmts:
            self.tick()
            if stmt[0] == "assign":
                self.env[stmt[1]] = self.eval(stmt[2])
            else:
                self.printed.append(str(self.eval(stmt[1])))


def run(program: Program, step_limit: int = DEFAULT_STEP_LIMIT) -> ExecResult:
    """Execute a program. All failures are encoded in the result, never raised."""
    if step_limit <= 0:
        raise ValueError("step_limit must be positive")
    try:
        stmts = parse(program.source)
    except _ParseError as exc:
        return ExecResult(status=ExecStatus.PARSE_ERROR, error_detail=str(exc))
    interp = _Interp(step_limit)
    try:
        interp.run(stmts)
    except _RuntimeFault as exc:
        return ExecResult(
            status=ExecStatus.RUNTIME_ERROR,
            error_detail=str(exc),
            steps=min(interp.steps, step_limit),
        )
    return ExecResult(status=ExecStatus.OK, output="\n".join(interp.printed), steps=interp.steps)
