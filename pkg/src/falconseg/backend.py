"""Kernel backend selection.

Every hot numeric kernel in this package ships in two builds: a numba
``@njit`` version and a vectorized pure-numpy version.  The default mode is
``auto``: each kernel family uses whichever build benchmarks faster on it
(geometry kernels run numba, convolutions run the numpy im2col + BLAS path,
which beats scalar loop nests at these channel counts).  Set
``FALCONSEG_BACKEND=numba`` or ``=numpy`` to force every kernel onto one
build; ``set_backend`` overrides the environment at runtime, which is how
the benchmark times both paths in one process.
"""

import os

try:
    import numba  # noqa: F401

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_VALID = ("numba", "numpy")
# auto mode: which kernel families default to the numba build
_AUTO_NUMBA = {"geometry": True, "conv": False}
_override: str | None = None


def numba_available() -> bool:
    return _HAVE_NUMBA


def set_backend(name: str | None) -> None:
    """Force a backend ("numba" or "numpy"); None restores env/auto selection."""
    global _override
    if name is not None and name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _override = name


def active_backend() -> str:
    """Current mode: "numba" or "numpy" when forced, else "auto"."""
    if _override is not None:
        return _override
    env = os.environ.get("FALCONSEG_BACKEND", "").strip().lower()
    if env in _VALID:
        return env
    if env:
        raise ValueError(f"FALCONSEG_BACKEND must be 'numba' or 'numpy', got {env!r}")
    return "auto"


def use_numba(kind: str = "geometry") -> bool:
    """Whether the given kernel family should run its numba build."""
    mode = active_backend()
    if mode == "auto":
        return _AUTO_NUMBA[kind] and _HAVE_NUMBA
    return mode == "numba"
