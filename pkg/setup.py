"""Build script for the optional compiled kernel core.

The package works without the extension (pure-numpy fallback is selected at
import time); building it just makes training and sampling faster:

    python setup.py build_ext --inplace
"""

import os

import numpy as np
from setuptools import setup

PYX = "src/phasediff/_kernels/_core.pyx"

extensions = []
if os.path.exists(PYX):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        extensions = cythonize(
            [
                Extension(
                    "phasediff._kernels._core",
                    [PYX],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )
    except ImportError:
        extensions = []

setup(ext_modules=extensions)
