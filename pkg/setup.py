import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "memvit._kernels._ckernels",
                ["src/memvit/_kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
        },
    )
except ImportError:
    # Pure-Python fallback is selected at import time, so a missing Cython
    # toolchain only costs speed, not functionality.
    ext_modules = []

setup(ext_modules=ext_modules)
