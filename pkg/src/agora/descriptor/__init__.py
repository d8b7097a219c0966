"""The `.sd` deployment description language."""

from .resolve import (
    ExtendsCycle, ReferenceCycle, ResolveError, UnknownPrototype, UnresolvedReference,
    builtin_prototypes, lint, load_prototypes, lookup, prototype_scope, resolve,
    resolve_extends, resolve_references, root_of,
)
from .syntax import (
    CLASS_ATTR, FILE_SCOPE, ROOT_NAME, ComponentDescription, DescriptorError, ParseError,
    RefKind, Reference, format_value, parse, parse_component, to_text,
)

print_tree = to_text

__all__ = [
    "CLASS_ATTR", "ComponentDescription", "DescriptorError", "ExtendsCycle", "FILE_SCOPE",
    "ParseError", "ROOT_NAME", "RefKind", "Reference", "ReferenceCycle", "ResolveError",
    "UnknownPrototype", "UnresolvedReference", "builtin_prototypes", "format_value", "lint",
    "load_prototypes", "lookup", "parse", "parse_component", "print_tree", "prototype_scope",
    "resolve", "resolve_extends", "resolve_references", "root_of", "to_text",
]
