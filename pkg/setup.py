from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # no build toolchain: install the pure-Python kernels only
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "cadnet.numerics._ckernels",
                ["src/cadnet/numerics/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )

setup(ext_modules=ext_modules)
