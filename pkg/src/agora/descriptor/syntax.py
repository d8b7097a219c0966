"""Data model, parser and canonical printer for `.sd` deployment descriptions.

Grammar (whitespace-insensitive, ``//`` line comments)::

    file      := component*
    component := IDENT ["extends" IDENT] ( "{" entry* "}" | ";" )
    entry     := component | IDENT value ";"
    value     := STRING | NUMBER | "true" | "false" | reference
    reference := ["REF"] ["LAZY"] ( "ATTRIB" IDENT
                                  | "sfConfig" (":" IDENT)*
                                  | "PARENT" (":" "PARENT")* (":" IDENT)* )
"""

from __future__ import annotations

import copy
import enum
import json
import re
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

ROOT_NAME = "sfConfig"
CLASS_ATTR = "sfClass"
FILE_SCOPE = ""

KEYWORDS = {"extends", "true", "false", "ATTRIB", "LAZY", "REF", "PARENT"}


class DescriptorError(Exception):
    def __init__(self, message: str, line: Optional[int] = None, col: Optional[int] = None):
        self.message = message
        self.line = line
        self.col = col
        where = f"{line}:{col}: " if line is not None else ""
        super().__init__(where + message)


class ParseError(DescriptorError):
    pass


class RefKind(str, enum.Enum):
    ATTRIB = "ATTRIB"
    PATH = "PATH"
    PARENT_CHAIN = "PARENT_CHAIN"


@dataclass(frozen=True)
class Reference:
    kind: RefKind
    segments: Tuple[str, ...]
    lazy: bool = False
    # PARENT hops before the path segments (PARENT_CHAIN only).
    hops: int = 0

    def __post_init__(self):
        if self.kind is RefKind.ATTRIB and len(self.segments) != 1:
            raise ValueError("ATTRIB references name exactly one attribute")
        if self.kind is RefKind.PARENT_CHAIN and self.hops < 1:
            raise ValueError("PARENT_CHAIN references need at least one PARENT")
        if self.kind is RefKind.PATH and (not self.segments or self.segments[0] != ROOT_NAME):
            raise ValueError("path references start at sfConfig")

    def __str__(self) -> str:
        prefix = "LAZY " if self.lazy else ""
        if self.kind is RefKind.ATTRIB:
            return f"{prefix}ATTRIB {self.segments[0]}"
        if self.kind is RefKind.PATH:
            return prefix + ":".join(self.segments)
        return prefix + ":".join(["PARENT"] * self.hops + list(self.segments))


Value = Union[str, int, float, bool, Reference, "ComponentDescription"]


@dataclass
class ComponentDescription:
    name: str
    attributes: Dict[str, Value] = field(default_factory=dict)
    children: Dict[str, "ComponentDescription"] = field(default_factory=dict)
    extends: Optional[str] = None
    pos: Optional[Tuple[int, int]] = field(default=None, compare=False, repr=False)
    attr_pos: Dict[str, Tuple[int, int]] = field(default_factory=dict, compare=False, repr=False)

    def copy(self, name: Optional[str] = None) -> "ComponentDescription":
        dup = copy.deepcopy(self)
        if name is not None:
            dup.name = name
        return dup

    def __contains__(self, name: str) -> bool:
        return name in self.attributes or name in self.children

    def get(self, name: str, default=None):
        if name in self.attributes:
            return self.attributes[name]
        return self.children.get(name, default)

    def walk(self, path: Tuple[str, ...] = ()) -> Iterator[Tuple[Tuple[str, ...], "ComponentDescription"]]:
        """Pre-order (path, node) pairs; the path excludes this node's name."""
        yield path, self
        for name, child in self.children.items():
            yield from child.walk(path + (name,))

    def find(self, path: Tuple[str, ...]) -> "ComponentDescription":
        node = self
        for seg in path:
            node = node.children[seg]
        return node

    @property
    def sf_class(self) -> Optional[str]:
        value = self.attributes.get(CLASS_ATTR)
        return value if isinstance(value, str) else None


# -- lexer -------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>//[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<number>-?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[{};:])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            if text[pos] == '"':
                raise ParseError("unterminated string", line, col)
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        chunk = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, chunk, line, col))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            line_start = pos + chunk.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# -- parser ------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    def peek(self, offset: int = 0) -> Token:
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, tok: Optional[Token] = None) -> ParseError:
        tok = tok or self.peek()
        return ParseError(message, tok.line, tok.col)

    def expect(self, kind: str, text: Optional[str] = None) -> Token:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text or kind
            got = tok.text or tok.kind
            raise self.error(f"expected {want!r}, found {got!r}")
        return self.next()

    def ident(self) -> Token:
        tok = self.expect("ident")
        if tok.text in KEYWORDS:
            raise self.error(f"keyword {tok.text!r} cannot be used as a name", tok)
        return tok

    def parse_file(self) -> ComponentDescription:
        scope = ComponentDescription(FILE_SCOPE, pos=(1, 1))
        while self.peek().kind != "eof":
            name_tok = self.ident()
            if not (self.peek().kind == "punct" and self.peek().text == "{") and not (
                    self.peek().kind == "ident" and self.peek().text == "extends"):
                raise self.error(f"top level holds components only; {name_tok.text!r} needs a body")
            comp = self.parse_component(name_tok)
            self._add_child(scope, comp, name_tok)
        return scope

    def parse_component(self, name_tok: Token) -> ComponentDescription:
        node = ComponentDescription(name_tok.text, pos=(name_tok.line, name_tok.col))
        if self.peek().kind == "ident" and self.peek().text == "extends":
            self.next()
            node.extends = self.ident().text
            if self.peek().kind == "punct" and self.peek().text == ";":
                self.next()
                return node
        self.expect("punct", "{")
        while not (self.peek().kind == "punct" and self.peek().text == "}"):
            if self.peek().kind == "eof":
                raise self.error(f"unclosed component {node.name!r}")
            self.parse_entry(node)
        self.next()
        return node

    def parse_entry(self, node: ComponentDescription) -> None:
        name_tok = self.ident()
        nxt = self.peek()
        if (nxt.kind == "punct" and nxt.text == "{") or (nxt.kind == "ident" and nxt.text == "extends"):
            self._add_child(node, self.parse_component(name_tok), name_tok)
            return
        value = self.parse_value()
        self.expect("punct", ";")
        if name_tok.text in node:
            raise ParseError(f"duplicate attribute {name_tok.text!r} in {node.name or 'file'}",
                             name_tok.line, name_tok.col)
        node.attributes[name_tok.text] = value
        node.attr_pos[name_tok.text] = (name_tok.line, name_tok.col)

    def _add_child(self, parent: ComponentDescription, child: ComponentDescription, tok: Token) -> None:
        if child.name in parent:
            raise ParseError(f"duplicate attribute {child.name!r} in {parent.name or 'file'}",
                             tok.line, tok.col)
        parent.children[child.name] = child

    def parse_value(self) -> Value:
        tok = self.peek()
        if tok.kind == "string":
            self.next()
            return json.loads(tok.text)
        if tok.kind == "number":
            self.next()
            if re.fullmatch(r"-?\d+", tok.text):
                return int(tok.text)
            return float(tok.text)
        if tok.kind == "ident":
            if tok.text == "true":
                self.next()
                return True
            if tok.text == "false":
                self.next()
                return False
            return self.parse_reference()
        raise self.error(f"expected a value, found {tok.text or tok.kind!r}")

    def parse_reference(self) -> Reference:
        lazy = False
        if self.peek().text == "REF":
            self.next()
        if self.peek().text == "LAZY":
            self.next()
            lazy = True
        if self.peek().text == "REF":
            self.next()
        tok = self.peek()
        if tok.kind != "ident":
            raise self.error("expected a reference")
        if tok.text == "ATTRIB":
            self.next()
            return Reference(RefKind.ATTRIB, (self.ident().text,), lazy)
        if tok.text == ROOT_NAME:
            self.next()
            return Reference(RefKind.PATH, (ROOT_NAME,) + self._path_tail(), lazy)
        if tok.text == "PARENT":
            self.next()
            hops = 1
            while self._at_colon() and self.peek(1).text == "PARENT":
                self.next()
                self.next()
                hops += 1
            return Reference(RefKind.PARENT_CHAIN, self._path_tail(), lazy, hops)
        raise self.error(f"bare word {tok.text!r} is not a value; quote strings or use a reference")

    def _at_colon(self) -> bool:
        return self.peek().kind == "punct" and self.peek().text == ":"

    def _path_tail(self) -> Tuple[str, ...]:
        segs = []
        while self._at_colon():
            self.next()
            segs.append(self.ident().text)
        return tuple(segs)


def parse(text: str) -> ComponentDescription:
    """Parse a whole file into a file-scope node whose children are the
    top-level components (``sfConfig`` and any prototypes)."""
    return _Parser(text).parse_file()


def parse_component(text: str) -> ComponentDescription:
    scope = parse(text)
    if len(scope.children) != 1:
        raise ParseError(f"expected exactly one component, found {len(scope.children)}")
    return next(iter(scope.children.values()))


# -- printer -----------------------------------------------------------------

def format_value(value: Value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError(f"non-finite number {value} has no source form")
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, Reference):
        return str(value)
    raise TypeError(f"cannot format {type(value).__name__}")


def _print_node(node: ComponentDescription, depth: int, out: List[str]) -> None:
    pad = "  " * depth
    head = node.name + (f" extends {node.extends}" if node.extends else "")
    entries = list(node.attributes.items())
    if not entries and not node.children:
        out.append(f"{pad}{head} {{}}")
        return
    out.append(f"{pad}{head} {{")
    for name, value in entries:
        if isinstance(value, ComponentDescription):
            _print_node(value.copy(name), depth + 1, out)
        else:
            out.append(f"{pad}  {name} {format_value(value)};")
    for child in node.children.values():
        _print_node(child, depth + 1, out)
    out.append(f"{pad}}}")


def to_text(tree: ComponentDescription) -> str:
    """Canonical text; two-space indent per depth, attributes before children."""
    out: List[str] = []
    if tree.name == FILE_SCOPE:
        for child in tree.children.values():
            _print_node(child, 0, out)
    else:
        _print_node(tree, 0, out)
    return "\n".join(out) + "\n"
