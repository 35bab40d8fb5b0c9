"""Builds the optional compiled convolution kernels.

The package works without the extension (a NumPy fallback is selected at
import time), so a failed build only costs speed, not functionality.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "qsr._kernels",
                sources=["src/qsr/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
