"""Recursive-descent syntax checker for the OpenSCAD subset we emit.

Accepts statements of the form ``name(args) child`` / ``name(args) { ... }``
/ ``name(args);`` with arguments that are numbers, vectors, strings,
booleans or identifiers, optionally ``key=value``. Comments are skipped.
This is a smoke test for syntactic validity, not an OpenSCAD interpreter.
"""

from __future__ import annotations

import re

from qcsg.errors import ValidationError

_TOKEN = re.compile(r"""
    (?P<ws>\s+|//[^\n]*|/\*.*?\*/)
  | (?P<num>-?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<str>"(?:[^"\\]|\\.)*")
  | (?P<id>[A-Za-z_$][A-Za-z0-9_]*)
  | (?P<op>[()\[\]{},;=+\-*/])
""", re.VERBOSE | re.DOTALL)

KNOWN_MODULES = {"union", "difference", "intersection", "polyhedron", "cube", "sphere", "cylinder",
                 "multmatrix", "translate", "rotate", "scale", "color", "hull"}


class ScadSyntaxError(ValidationError):
    pass


def tokenize(text):
    pos, out = 0, []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            line = text.count("\n", 0, pos) + 1
            raise ScadSyntaxError(f"line {line}: unexpected character {text[pos]!r}")
        if m.lastgroup != "ws":
            out.append((m.lastgroup, m.group(), text.count("\n", 0, pos) + 1))
        pos = m.end()
    out.append(("eof", "", text.count("\n") + 1))
    return out


class _Parser:
    def __init__(self, tokens):
        self.toks = tokens
        self.i = 0
        self.calls = []

    def peek(self):
        return self.toks[self.i]

    def expect(self, value=None, kind=None):
        k, v, line = self.toks[self.i]
        if (value is not None and v != value) or (kind is not None and k != kind):
            want = value if value is not None else kind
            raise ScadSyntaxError(f"line {line}: expected {want!r}, got {v or 'end of file'!r}")
        self.i += 1
        return v

    def program(self):
        while self.peek()[0] != "eof":
            self.statement()

    def statement(self):
        k, v, line = self.peek()
        if v == ";":
            self.i += 1
            return
        if v == "{":
            self.i += 1
            while self.peek()[1] != "}":
                if self.peek()[0] == "eof":
                    raise ScadSyntaxError(f"line {line}: unterminated block")
                self.statement()
            self.i += 1
            return
        name = self.expect(kind="id")
        if name not in KNOWN_MODULES:
            raise ScadSyntaxError(f"line {line}: unknown module {name!r}")
        self.calls.append(name)
        self.expect("(")
        self.arguments()
        self.expect(")")
        self.statement()

    def arguments(self):
        if self.peek()[1] == ")":
            return
        while True:
            if self.peek()[0] == "id" and self.toks[self.i + 1][1] == "=":
                self.i += 2
            self.expr()
            if self.peek()[1] != ",":
                return
            self.i += 1

    def expr(self):
        self.term()
        while self.peek()[1] in ("+", "-", "*", "/"):
            self.i += 1
            self.term()

    def term(self):
        k, v, line = self.peek()
        if v == "-":
            self.i += 1
            return self.term()
        if k in ("num", "str", "id"):
            self.i += 1
            return
        if v == "[":
            self.i += 1
            if self.peek()[1] != "]":
                while True:
                    self.expr()
                    if self.peek()[1] != ",":
                        break
                    self.i += 1
            self.expect("]")
            return
        if v == "(":
            self.i += 1
            self.expr()
            self.expect(")")
            return
        raise ScadSyntaxError(f"line {line}: unexpected token {v or 'end of file'!r}")


def check_scad(text):
    """Raise ScadSyntaxError on invalid input; return the list of module calls."""
    p = _Parser(tokenize(text))
    p.program()
    return p.calls
