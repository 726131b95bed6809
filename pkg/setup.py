"""Build script: compiles the optional range-coder extension.

The package works without the extension (a pure-Python twin is selected
at import time), so a failed compile only costs speed, never correctness.
"""

import sys

from setuptools import Extension, setup


def _extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("microcodec: Cython not available, skipping compiled coder", file=sys.stderr)
        return []
    ext = Extension(
        "microcodec.bitstream._range_cy",
        ["src/microcodec/bitstream/_range_cy.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


try:
    setup(ext_modules=_extensions())
except SystemExit:
    raise
except Exception as exc:  # noqa: BLE001 - extension build is best effort
    print(f"microcodec: extension build failed ({exc}); retrying pure Python", file=sys.stderr)
    setup(ext_modules=[])
