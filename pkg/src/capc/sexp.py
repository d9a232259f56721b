"""A small S-expression reader that keeps source positions for diagnostics."""

from __future__ import annotations

import re


class ParseError(Exception):
    def __init__(self, message, line=0, col=0):
        super().__init__(f"{line}:{col}: {message}" if line else message)
        self.message = message
        self.line = line
        self.col = col


class Sym(str):
    line = 0
    col = 0


class Num(int):
    line = 0
    col = 0


class SList(list):
    line = 0
    col = 0


_TOKEN = re.compile(r"\s+|;[^\n]*|\(|\)|[^\s();]+")
_INT = re.compile(r"[+-]?\d+$")


def _tokens(text):
    line, line_start = 1, 0
    for m in _TOKEN.finditer(text):
        tok = m.group()
        col = m.start() - line_start + 1
        if tok[0].isspace() or tok[0] == ";":
            nl = tok.count("\n")
            if nl:
                line += nl
                line_start = m.start() + tok.rfind("\n") + 1
            continue
        yield tok, line, col


def read_all(text: str) -> list:
    """Parse every top-level form in text."""
    stack = [SList()]
    for tok, line, col in _tokens(text):
        if tok == "(":
            node = SList()
            node.line, node.col = line, col
            stack[-1].append(node)
            stack.append(node)
        elif tok == ")":
            if len(stack) == 1:
                raise ParseError("unexpected ')'", line, col)
            stack.pop()
        else:
            atom = Num(int(tok)) if _INT.match(tok) else Sym(tok)
            atom.line, atom.col = line, col
            stack[-1].append(atom)
    if len(stack) > 1:
        open_node = stack[-1]
        raise ParseError("unclosed '('", open_node.line, open_node.col)
    return stack[0]


def pos(node):
    return getattr(node, "line", 0), getattr(node, "col", 0)


def fail(node, message):
    line, col = pos(node)
    raise ParseError(message, line, col)


def expect_list(node, head=None, what=None):
    if not isinstance(node, list):
        fail(node, f"expected {what or head or 'a list'}, got {node!r}")
    if head is not None and (not node or node[0] != head):
        fail(node, f"expected ({head} ...)")
    return node


def expect_sym(node, what="identifier"):
    if not isinstance(node, str):
        fail(node, f"expected {what}")
    return str(node)


def expect_num(node, what="integer"):
    if not isinstance(node, int) or isinstance(node, bool):
        fail(node, f"expected {what}")
    return int(node)
