"""Arithmetic expressions in configs, e.g. ``"0.5 + 0.2*abs(sin(x/8))**0.8"``.

Expressions are parsed with :mod:`ast` and only arithmetic, numeric
literals, the variables ``t``, ``x``, ``y``, ``W``, ``pi`` and a fixed set of
numpy functions are accepted.
"""

from __future__ import annotations

import ast
from typing import Callable

import numpy as np

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
    "sign": np.sign,
    "minimum": np.minimum,
    "maximum": np.maximum,
    "where": np.where,
}
VARIABLES = ("t", "x", "y", "W")
_ALLOWED = (
    ast.Expression,
    ast.BinOp,
    ast.UnaryOp,
    ast.Compare,
    ast.Call,
    ast.Name,
    ast.Load,
    ast.Constant,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.Pow,
    ast.Mod,
    ast.USub,
    ast.UAdd,
    ast.Lt,
    ast.LtE,
    ast.Gt,
    ast.GtE,
)


class ExpressionError(ValueError):
    pass


def compile_expr(text: str, variables=VARIABLES) -> Callable[..., np.ndarray]:
    """Return ``f(**values)`` evaluating ``text``; unknown names and constructs are rejected."""
    try:
        tree = ast.parse(str(text), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ExpressionError(f"{type(node).__name__} is not allowed in {text!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ExpressionError(f"only numeric literals are allowed in {text!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in FUNCTIONS):
            raise ExpressionError(f"unknown function in {text!r}")
        if isinstance(node, ast.Call) and node.keywords:
            raise ExpressionError(f"keyword arguments are not allowed in {text!r}")
        if isinstance(node, ast.Name) and node.id not in FUNCTIONS and node.id not in variables and node.id != "pi":
            raise ExpressionError(f"unknown name {node.id!r} in {text!r}")
    code = compile(tree, "<expr>", "eval")
    base = {"__builtins__": {}, "pi": np.pi, **FUNCTIONS}

    def evaluate(**values):
        missing = [v for v in values if v not in variables]
        if missing:
            raise ExpressionError(f"unexpected variables {missing}")
        return np.asarray(eval(code, base, {name: values.get(name, 0.0) for name in variables}), dtype=float)

    evaluate.text = text
    return evaluate


def field_txy(text) -> Callable:
    """``(t, x, y) -> value`` from an expression or a number (``W`` is an alias for ``y``)."""
    if isinstance(text, (int, float)):
        c = float(text)
        return lambda t, x, y: c + 0.0 * np.asarray(x)
    f = compile_expr(text)
    return lambda t, x, y: f(t=t, x=x, y=y, W=y) + 0.0 * np.asarray(x)


def field_tx(text) -> Callable:
    """``(t, x) -> value`` for the solver's ``sample_field``."""
    g = field_txy(text)
    return lambda t, x: g(t, x, 0.0)
