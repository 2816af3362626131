import hashlib
import math
from typing import Any, Callable

__all__ = ("get_hash", "dump_container")


def get_hash(data: Any, *, digest_size: int = 16) -> str:
    """blake2b hash of Python data.

    Limited to scalars and (nested) dicts and lists of scalars, such as the
    output of `json.loads(model.json())`. Floats are streamed by `repr`, so two
    payloads hash equal only when every number round-trips to the same value.
    """
    hasher = hashlib.blake2b(digest_size=digest_size)
    dump_container(data, hasher.update)
    return hasher.hexdigest()


def dump_container(c: Any, func: Callable[[bytes], Any]) -> None:
    """Stream the contents of a container through `func` in a repeatable order."""
    if isinstance(c, dict):
        func(b"{")
        for k in sorted(c, key=str):
            func(f"{k}:".encode("utf-8"))
            dump_container(c[k], func)
            func(b",")
        func(b"}")
    elif isinstance(c, (list, tuple)):
        func(b"[")
        for item in c:
            dump_container(item, func)
            func(b",")
        func(b"]")
    elif isinstance(c, bytes):
        func(c)
    elif isinstance(c, str):
        func(f"'{c}'".encode("utf-8"))
    elif isinstance(c, float):
        func((repr(c) if math.isfinite(c) else str(c)).encode("utf-8"))
    else:
        func(str(c).encode("utf-8"))
