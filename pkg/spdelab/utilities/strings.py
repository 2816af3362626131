"""Miscellaneous utility functions for working with strings.
"""
from typing import Optional, Sequence

__all__ = ("join_to_series", "format_number", "parse_number")


def join_to_series(
    items: Sequence[str], *, conjunction: str = "and", oxford_comma: bool = True
) -> str:
    """
    Concatenate a sequence of strings into a series suitable for use in English output.

    Items are joined using a comma and a configurable conjunction, defaulting to 'and'.
    """
    count = len(items)
    if count == 0:
        return ""
    elif count == 1:
        return items[0]
    elif count == 2:
        return f" {conjunction} ".join(items)
    else:
        series = ", ".join(items[0:-1])
        delimiter = "," if oxford_comma else ""
        return f"{series}{delimiter} {conjunction} {items[-1]}"


def format_number(value: Optional[float]) -> str:
    """Render a number for a report cell: `repr` for floats so it parses back exactly, empty for None."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def parse_number(text: str) -> Optional[float]:
    """Inverse of `format_number` for float cells."""
    if text == "":
        return None
    return float(text)
