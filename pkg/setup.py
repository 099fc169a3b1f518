"""Build the optional Cython scan kernel.

If Cython or a C compiler is missing the package still installs and the
numpy fallback in ``damamba.kernels._scan_py`` is used.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "damamba.kernels._scan",
                ["src/damamba/kernels/_scan.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
