"""Build script: compiles the Krylov kernels when Cython and a C compiler
are available, and installs the pure-Python package otherwise."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("DINGO_NO_EXTENSION", "") in ("", "0"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "dingo.kernels._ckernels",
                    ["src/dingo/kernels/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
            annotate=False,
        )

setup(ext_modules=ext_modules)
