"""Marker base shared by the AD value types."""


class ADValue:
    """Common base of :class:`Dual` and :class:`Var`; carries a ``value`` array."""

    __slots__ = ()


def primal(x):
    """Numeric value underneath an AD wrapper; plain numbers pass through."""
    return x.value if isinstance(x, ADValue) else x
