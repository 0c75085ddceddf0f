"""Build script: compiles the optional MaxSim kernel extension.

The extension is best effort. If Cython or scipy (for its BLAS .pxd
bindings) is missing, or compilation fails, the package installs anyway
and falls back to the numpy kernels at import time.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/miniclir/kernels/_maxsim_cy.pyx"],
        language_level="3",
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError as exc:
    print(f"miniclir: skipping compiled kernels ({exc}); "
          "numpy fallback will be used", file=sys.stderr)

setup(ext_modules=ext_modules)
