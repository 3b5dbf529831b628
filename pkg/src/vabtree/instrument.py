"""Test-only pause points.

Scheduled-race tests need to stall a thread at a precise step inside an
operation (for example between reading the global version and publishing it
with a compare-and-swap). Production code calls :func:`pause` at those steps;
by default the registry is empty and the call is a single falsy dict check.
Tests install a callback with :func:`set_hook` and choreograph threads with
events of their own.
"""

from typing import Callable, Optional

_hooks: dict = {}


def pause(site: str) -> None:
    """Invoke the hook installed for ``site``, if any."""
    if _hooks:
        fn = _hooks.get(site)
        if fn is not None:
            fn(site)


def set_hook(site: str, fn: Optional[Callable[[str], None]]) -> None:
    if fn is None:
        _hooks.pop(site, None)
    else:
        _hooks[site] = fn


def clear_hooks() -> None:
    _hooks.clear()
