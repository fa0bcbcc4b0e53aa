"""Build the optional compiled kernel core.

The extension is marked optional: if compilation fails the package still
installs and :mod:`asilfd.backend` falls back to the NumPy kernels.
Set ``ASILFD_MARCH_NATIVE=1`` to compile for the host CPU.
"""
import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

compile_args = ["-O3"]
if os.environ.get("ASILFD_MARCH_NATIVE") == "1":
    compile_args.append("-march=native")

extensions = [
    Extension(
        "asilfd._core",
        ["src/asilfd/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": 3}),
)
