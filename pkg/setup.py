"""Build script: compiles the optional fast kernels, falls back to pure python.

The package is fully functional without the extension; `voxcity.kernels`
selects the compiled backend at import time when available.
"""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the Cython kernels best-effort; never fail the install."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: skipping compiled kernels ({exc})", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); "
                  "pure-python kernels will be used", file=sys.stderr)


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "voxcity.kernels._fast",
        sources=["src/voxcity/kernels/_fast.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
