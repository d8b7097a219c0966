"""Prototype flattening and reference resolution.

Resolution runs strictly after flattening, so a reference can only ever
see overridden values.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .syntax import (
    FILE_SCOPE, ROOT_NAME, ComponentDescription, DescriptorError, RefKind, Reference, Value, parse,
)

BUILTIN_PROTOTYPES = Path(__file__).with_name("prototypes.sd")

Path_ = Tuple[str, ...]


class ResolveError(DescriptorError):
    pass


class UnknownPrototype(ResolveError):
    pass


class ExtendsCycle(ResolveError):
    pass


class UnresolvedReference(ResolveError):
    pass


class ReferenceCycle(ResolveError):
    pass


def _where(node: ComponentDescription) -> Tuple[Optional[int], Optional[int]]:
    return node.pos if node.pos else (None, None)


# -- extension ---------------------------------------------------------------

def resolve_extends(tree: ComponentDescription,
                    prototypes: Mapping[str, ComponentDescription]) -> ComponentDescription:
    """Return a flattened deep copy of `tree`.

    A node that extends a prototype starts as a copy of the flattened
    prototype; its own attributes replace same-named entries in place and
    new ones are appended. A same-named child without its own ``extends``
    refines the inherited child instead of replacing it.
    """
    return _flatten(tree, prototypes, ())


def _flatten(node: ComponentDescription, protos: Mapping[str, ComponentDescription],
             chain: Tuple[str, ...]) -> ComponentDescription:
    if node.extends is not None:
        name = node.extends
        if name in chain:
            cycle = list(chain[chain.index(name):]) + [name]
            raise ExtendsCycle("extends cycle: " + " -> ".join(cycle), *_where(node))
        proto = protos.get(name)
        if proto is None:
            raise UnknownPrototype(f"{node.name or 'component'} extends unknown prototype {name!r}",
                                   *_where(node))
        base = _flatten(proto, protos, chain + (name,)).copy(node.name)
        base.pos = node.pos
    else:
        base = ComponentDescription(node.name, pos=node.pos)
    return _overlay(base, node, protos, chain)


def _overlay(base: ComponentDescription, node: ComponentDescription,
             protos: Mapping[str, ComponentDescription], chain: Tuple[str, ...]) -> ComponentDescription:
    attrs = dict(base.attributes)
    children = dict(base.children)
    attr_pos = dict(base.attr_pos)
    for key, value in node.attributes.items():
        children.pop(key, None)
        attrs[key] = value
        if key in node.attr_pos:
            attr_pos[key] = node.attr_pos[key]
    for key, child in node.children.items():
        attrs.pop(key, None)
        if key in children and child.extends is None:
            children[key] = _overlay(children[key], child, protos, chain)
        else:
            children[key] = _flatten(child, protos, chain)
    return ComponentDescription(base.name, attrs, children, None, base.pos, attr_pos)


# -- references --------------------------------------------------------------

def _fmt_path(path: Path_, attr: Optional[str] = None) -> str:
    parts = [ROOT_NAME] + list(path) + ([attr] if attr else [])
    return ":".join(parts)


class _Resolver:
    def __init__(self, root: ComponentDescription, allow_lazy: bool = False):
        self.root = root
        self.allow_lazy = allow_lazy
        self.in_progress: Set[Tuple[Path_, str]] = set()

    def node(self, path: Path_) -> ComponentDescription:
        return self.root.find(path)

    def locate(self, path: Path_, attr: str, ref: Reference) -> Tuple[Path_, Optional[str]]:
        """Find what `ref` (held by attribute `attr` at `path`) points to.

        Returns (node path, attribute name) for a value, or (node path,
        None) when the target is a component.
        """
        if ref.kind is RefKind.ATTRIB:
            name = ref.segments[0]
            here = path
            while True:
                node = self.node(here)
                skip = here == path and name == attr
                if not skip and name in node:
                    if name in node.children:
                        return here + (name,), None
                    return here, name
                if not here:
                    break
                here = here[:-1]
            raise UnresolvedReference(f"{_fmt_path(path, attr)}: cannot resolve {ref}: "
                                      f"{name!r} is not defined in any enclosing component",
                                      *self._pos(path, attr))
        if ref.kind is RefKind.PATH:
            anchor: Path_ = ()
            segments = ref.segments[1:]
        else:
            if ref.hops > len(path):
                raise UnresolvedReference(f"{_fmt_path(path, attr)}: {ref} climbs above sfConfig",
                                          *self._pos(path, attr))
            anchor = path[:len(path) - ref.hops]
            segments = ref.segments
        here = anchor
        for i, seg in enumerate(segments):
            node = self.node(here)
            last = i == len(segments) - 1
            if seg in node.children:
                here = here + (seg,)
                continue
            if last and seg in node.attributes:
                return here, seg
            raise UnresolvedReference(f"{_fmt_path(path, attr)}: cannot resolve {ref}: "
                                      f"no {seg!r} under {_fmt_path(here)}", *self._pos(path, attr))
        return here, None

    def _pos(self, path: Path_, attr: str):
        try:
            return self.node(path).attr_pos.get(attr, (None, None))
        except KeyError:
            return (None, None)

    def value(self, path: Path_, attr: str) -> Value:
        node = self.node(path)
        value = node.attributes[attr]
        if not isinstance(value, Reference) or (value.lazy and not self.allow_lazy):
            return value
        key = (path, attr)
        if key in self.in_progress:
            raise ReferenceCycle(f"reference cycle through {_fmt_path(path, attr)}",
                                 *self._pos(path, attr))
        self.in_progress.add(key)
        try:
            target_path, target_attr = self.locate(path, attr, value)
            if target_attr is None:
                resolved = self.component(target_path)
            else:
                resolved = self.value(target_path, target_attr)
        finally:
            self.in_progress.discard(key)
        if not self.allow_lazy:
            node.attributes[attr] = resolved
        return resolved

    def component(self, path: Path_) -> ComponentDescription:
        self.resolve_subtree(path)
        return self.node(path).copy()

    def resolve_subtree(self, path: Path_) -> None:
        for sub, node in self.node(path).walk(path):
            for attr in list(node.attributes):
                self.value(sub, attr)


def resolve_references(tree: ComponentDescription) -> ComponentDescription:
    """Replace every non-lazy reference in a flattened tree by its target."""
    root = tree.copy()
    _Resolver(root).resolve_subtree(())
    return root


def lookup(root: ComponentDescription, path: Sequence[str], attr: str) -> Value:
    """Resolve one attribute against a live tree, following lazy references too.

    The tree is not modified; used by the deployment engine at deploy time.
    """
    return _Resolver(root, allow_lazy=True).value(tuple(path), attr)


# -- pipeline ----------------------------------------------------------------

def load_prototypes(paths: Iterable[Path]) -> Dict[str, ComponentDescription]:
    protos: Dict[str, ComponentDescription] = {}
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.sd")) if p.is_dir() else [p]
        for f in files:
            for name, comp in parse(f.read_text(encoding="utf-8")).children.items():
                if name != ROOT_NAME:
                    protos.setdefault(name, comp)
    return protos


def builtin_prototypes() -> Dict[str, ComponentDescription]:
    return load_prototypes([BUILTIN_PROTOTYPES])


def prototype_scope(document: ComponentDescription,
                    include: Sequence[Path] = ()) -> Dict[str, ComponentDescription]:
    """Lookup order: same-file top-level components, include path, built-ins."""
    scope: Dict[str, ComponentDescription] = {}
    for name, comp in document.children.items():
        if name != ROOT_NAME:
            scope[name] = comp
    for name, comp in load_prototypes(include).items():
        scope.setdefault(name, comp)
    for name, comp in builtin_prototypes().items():
        scope.setdefault(name, comp)
    return scope


def root_of(document: ComponentDescription) -> ComponentDescription:
    if document.name == ROOT_NAME:
        return document
    if document.name != FILE_SCOPE or ROOT_NAME not in document.children:
        raise ResolveError(f"no {ROOT_NAME} component to deploy")
    return document.children[ROOT_NAME]


def resolve(document: ComponentDescription, include: Sequence[Path] = ()) -> ComponentDescription:
    """Flatten and resolve the ``sfConfig`` tree of a parsed file."""
    root = root_of(document)
    flat = resolve_extends(root, prototype_scope(document, include))
    return resolve_references(flat)


def lint(document: ComponentDescription, include: Sequence[Path] = (),
         known_classes: Optional[Iterable[str]] = None) -> List[str]:
    """Diagnostics that a deploy would trip over; empty when clean."""
    problems: List[str] = []
    try:
        resolved = resolve(document, include)
    except DescriptorError as exc:
        return [str(exc)]
    if known_classes is not None:
        known = set(known_classes)
        for path, node in resolved.walk():
            cls = node.sf_class
            if cls is None:
                problems.append(f"{_fmt_path(path)}: no sfClass")
            elif cls not in known:
                problems.append(f"{_fmt_path(path)}: unknown sfClass {cls!r}")
    for path, node in resolved.walk():
        for attr, value in node.attributes.items():
            if isinstance(value, Reference) and value.lazy:
                try:
                    lookup(resolved, path, attr)
                except DescriptorError as exc:
                    problems.append(f"lazy reference may fail at deploy time: {exc}")
    return problems
