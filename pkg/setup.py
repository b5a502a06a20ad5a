"""Build script for the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes the training/search inner loops faster.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "routekit._kernels._ckernels",
                ["src/routekit/_kernels/_ckernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
