"""Sandboxed loader for uploaded programs.

Uploaded programs are plain Python source validated against a restricted AST
before compilation. The containment story is capability-based: guest code
gets exactly two roots, ``api`` (the per-instance host surface) and ``lib``
(generation helpers), and the validator closes the ambient escape hatches —
no imports, no dunder access, no bare except, and a builtins table with the
introspection tools removed. Guests are cooperative, not adversarial-proof;
the boundary that matters is that all externally visible effects must flow
through ``api``.

The compiled code object is cached by content hash; see docs/abi.md for the
surface guests may rely on.
"""
from __future__ import annotations

import ast
from typing import Any, Dict

from .errors import LoadFailure

_FORBIDDEN_NODES = (
    ast.Import,
    ast.ImportFrom,
    ast.Global,
    ast.Nonlocal,
)

_SAFE_BUILTINS: Dict[str, Any] = {
    "abs": abs, "all": all, "any": any, "bool": bool, "bytearray": bytearray,
    "bytes": bytes, "callable": callable, "chr": chr, "dict": dict,
    "divmod": divmod, "enumerate": enumerate, "filter": filter, "float": float,
    "format": format, "frozenset": frozenset, "hash": hash, "hex": hex,
    "int": int, "isinstance": isinstance, "issubclass": issubclass,
    "iter": iter, "len": len, "list": list, "map": map, "max": max,
    "min": min, "next": next, "oct": oct, "ord": ord, "pow": pow,
    "range": range, "repr": repr, "reversed": reversed, "round": round,
    "set": set, "slice": slice, "sorted": sorted, "str": str, "sum": sum,
    "tuple": tuple, "zip": zip, "print": None,
    "Exception": Exception, "ValueError": ValueError, "TypeError": TypeError,
    "KeyError": KeyError, "IndexError": IndexError, "RuntimeError": RuntimeError,
    "StopIteration": StopIteration, "ZeroDivisionError": ZeroDivisionError,
    "ArithmeticError": ArithmeticError, "LookupError": LookupError,
    "AttributeError": AttributeError, "NotImplementedError": NotImplementedError,
    "True": True, "False": False, "None": None,
}
# print is replaced per-instance so output can be routed to the client.


def _names_of(node: ast.AST):
    if isinstance(node, ast.Name):
        yield node.id
    elif isinstance(node, ast.Attribute):
        yield node.attr
    elif isinstance(node, ast.arg):
        yield node.arg
    elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
        yield node.name
    elif isinstance(node, ast.keyword) and node.arg:
        yield node.arg
    elif isinstance(node, (ast.ImportFrom, ast.Import)):
        for alias in node.names:
            yield alias.name


def validate_source(source: str) -> ast.Module:
    try:
        tree = ast.parse(source, mode="exec")
    except SyntaxError as e:
        raise LoadFailure(f"syntax error: {e}") from None
    for node in ast.walk(tree):
        if isinstance(node, _FORBIDDEN_NODES):
            raise LoadFailure(
                f"forbidden construct {type(node).__name__} at line "
                f"{getattr(node, 'lineno', '?')}")
        if isinstance(node, ast.ExceptHandler) and node.type is None:
            raise LoadFailure(
                f"bare except at line {node.lineno} is not allowed")
        for name in _names_of(node):
            if name.startswith("__") or name.endswith("__"):
                raise LoadFailure(
                    f"dunder name {name!r} at line "
                    f"{getattr(node, 'lineno', '?')} is not allowed")
    return tree


def compile_guest(source: str, tag: str):
    """Validate and compile; raises LoadFailure on anything unacceptable."""
    tree = validate_source(source)
    has_main = any(
        isinstance(n, ast.AsyncFunctionDef) and n.name == "main"
        for n in tree.body)
    if not has_main:
        raise LoadFailure("program must define `async def main(api)`")
    try:
        return compile(tree, f"<guest {tag}>", "exec", dont_inherit=True)
    except (SyntaxError, ValueError) as e:
        raise LoadFailure(f"compilation failed: {e}") from None


def instantiate(code, api, lib_namespace, emit_print) -> Any:
    """Run module top-level code and return the main coroutine."""
    builtins = dict(_SAFE_BUILTINS)
    builtins["print"] = emit_print
    namespace: Dict[str, Any] = {
        "__builtins__": builtins,
        "api": api,
        "lib": lib_namespace,
    }
    try:
        exec(code, namespace)
    except Exception as e:
        raise LoadFailure(f"top-level execution failed: {e!r}") from None
    main = namespace.get("main")
    if main is None:
        raise LoadFailure("program must define `async def main(api)`")
    try:
        coro = main(api)
    except Exception as e:
        raise LoadFailure(f"calling main failed: {e!r}") from None
    if not hasattr(coro, "send"):
        raise LoadFailure("main(api) must be a coroutine function")
    return coro
