import os
import sys

import numpy as np
from setuptools import Extension, setup

# SPLATSIM_NO_EXT=1 installs the pure-Python fallback only.
ext_modules = []
if not os.environ.get("SPLATSIM_NO_EXT"):
    from Cython.Build import cythonize

    if sys.platform == "win32":
        compile_args = ["/O2", "/openmp"]
        link_args = []
    else:
        compile_args = ["-O3", "-fopenmp"]
        link_args = ["-fopenmp"]

    extensions = [
        Extension(
            "splatsim._core",
            ["src/splatsim/_core.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=compile_args,
            extra_link_args=link_args,
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
