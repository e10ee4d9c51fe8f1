"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a NumPy fallback is
selected at import time), so compilation failures are downgraded to a
warning instead of aborting the install.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler, broken toolchain, ...
            warnings.warn(f"compiled kernels not built ({exc}); using NumPy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"compiled kernels not built ({exc}); using NumPy fallback")


def extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError as exc:
        warnings.warn(f"compiled kernels not built ({exc}); using NumPy fallback")
        return []
    ext = Extension(
        "specmap.kernels._fast",
        ["src/specmap/kernels/_fast.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
