import sys

from setuptools import setup

# The compiled kernels are an optional fast path: if Cython or a C compiler
# is unavailable the package installs anyway and falls back to numpy at
# import time (see surgscene.kernels).
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    extensions = cythonize(
        [
            Extension(
                "surgscene.kernels._ckernels",
                ["src/surgscene/kernels/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    print(f"warning: building without compiled kernels ({exc})", file=sys.stderr)
    extensions = []

setup(ext_modules=extensions)
