"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so any build failure here downgrades to a warning.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/taxposed/kernels/_native.pyx",
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )
    include_dirs = [numpy.get_include()]
    for ext in ext_modules:
        ext.include_dirs.extend(include_dirs)
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"warning: skipping native kernel build ({exc}); numpy fallback will be used", file=sys.stderr)

setup(ext_modules=ext_modules)
