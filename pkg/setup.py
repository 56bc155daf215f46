import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fallback kernel is used
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("SAWMOTION_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "sawmotion.sim._ckernel",
                ["src/sawmotion/sim/_ckernel.pyx"],
                # bit-identical to the pure-Python kernel: no fast-math, no FMA contraction
                extra_compile_args=["-O2", "-ffp-contract=off", "-fno-fast-math"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
