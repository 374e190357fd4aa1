import os

import numpy as np
from setuptools import Extension, setup

# Compiled kernels are optional; ctbench.kernels falls back to numpy.
ext_modules = []
if not os.environ.get("CTBENCH_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "ctbench._kernels",
                    ["src/ctbench/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
