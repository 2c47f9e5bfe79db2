from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # no Cython: install the pure-Python backend only
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "gridmpc._ckernels",
                ["src/gridmpc/_ckernels.pyx"],
                # No FMA contraction: keeps results identical to the numpy backend.
                extra_compile_args=["-O2", "-ffp-contract=off"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
