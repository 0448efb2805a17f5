import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fall back to the pure-numpy kernels
    ext_modules = []
else:
    flags = ["-O3", "-ffast-math"]
    # tuned for the build host unless a portable binary is requested
    if os.environ.get("UNICLAM_PORTABLE", "") in ("", "0"):
        flags.append("-march=native")
    ext_modules = cythonize(
        [
            Extension(
                "uniclam._kernels_c",
                ["src/uniclam/_kernels_c.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=flags,
                libraries=["mvec", "m"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
