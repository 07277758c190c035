import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FREEBOUND_NO_EXT", "") in ("", "0"):
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [Extension("freebound._ckernels", ["src/freebound/_ckernels.pyx"],
                       include_dirs=[numpy.get_include()], extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # no Cython or numpy at build time: the numpy fallback is used
        ext_modules = []

setup(ext_modules=ext_modules)
