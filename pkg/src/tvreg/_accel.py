"""Backend selection for the voxel kernels.

Numba is used when importable unless ``TVREG_NUMBA`` is set to ``0``/``false``/``no``.
The pure-numpy path implements the same arithmetic and is what runs when
numba is absent.
"""
import contextlib
import os
import warnings

# numba falls back to another threading layer when the system TBB is too old
warnings.filterwarnings("ignore", message="The TBB threading layer requires")

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_enabled():
    value = os.environ.get("TVREG_NUMBA", "1").strip().lower()
    return value not in ("0", "false", "no", "off")


_use_numba = HAVE_NUMBA and _env_enabled()


def numba_enabled():
    return _use_numba


def set_numba(enabled):
    """Switch the active backend; returns the previous setting."""
    global _use_numba
    previous = _use_numba
    _use_numba = bool(enabled) and HAVE_NUMBA
    return previous


@contextlib.contextmanager
def backend(name):
    """Temporarily run kernels on ``"numba"`` or ``"numpy"``."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    previous = set_numba(name == "numba")
    try:
        yield
    finally:
        set_numba(previous)


def kernels():
    """Return the kernel module for the active backend."""
    if _use_numba:
        from . import _kernels_nb

        return _kernels_nb
    from . import _kernels_np

    return _kernels_np


def set_threads(n):
    if HAVE_NUMBA and n:
        numba.set_num_threads(int(n))
