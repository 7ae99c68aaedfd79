"""ALU kernel: the compiled extension when built, else the pure-Python twin.

Set ``DBISHIELD_PURE=1`` to force the fallback.
"""

import os

if os.environ.get("DBISHIELD_PURE"):
    from ._pykernel import alu, flags_add, flags_sub, flags_zn
    BACKEND = "python"
else:
    try:
        from ._ckernel import alu, flags_add, flags_sub, flags_zn
        BACKEND = "cython"
    except ImportError:
        from ._pykernel import alu, flags_add, flags_sub, flags_zn
        BACKEND = "python"

__all__ = ["alu", "flags_add", "flags_sub", "flags_zn", "BACKEND"]
