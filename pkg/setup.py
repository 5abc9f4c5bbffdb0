"""Build script for the optional compiled min-cut kernel.

The package is pure Python except for ``hetplan._mincut_c``, a Cython
translation of the Stoer-Wagner phase loop that dominates cluster
partitioning time on large device graphs.  If Cython or a C compiler is
unavailable the build degrades to the numpy fallback kernel silently;
``hetplan.partition.MINCUT_BACKEND`` reports which one was loaded.
"""

import warnings

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "hetplan._mincut_c",
                sources=["src/hetplan/_mincut_c.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError as exc:  # pragma: no cover - exercised only on builds without Cython
    warnings.warn(f"building without compiled min-cut kernel: {exc}")

setup(ext_modules=ext_modules)
