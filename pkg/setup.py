import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("RADARBA_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "radarba.kernels._geom",
                    ["src/radarba/kernels/_geom.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # No Cython at build time: install pure-python; the kernels package
        # falls back to the numpy backend at import.
        ext_modules = []

setup(ext_modules=ext_modules)
