"""Build script for the compiled simulation kernel.

The extension is optional: if the build fails (no compiler, no Cython),
the package installs anyway and falls back to the pure-numpy kernel at
import time.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "spikecp.backend._forward_cy",
        ["src/spikecp/backend/_forward_cy.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"})
    if cythonize is not None
    else [],
)
