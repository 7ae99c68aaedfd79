from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # no Cython: install the pure-Python kernel only
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("dbishield.kernel._ckernel", ["src/dbishield/kernel/_ckernel.pyx"],
                   extra_compile_args=["-O2"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
