from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
    extensions = cythonize(
        [Extension("mvpolicy._core", ["src/mvpolicy/_core.pyx"],
                   extra_compile_args=["-O3"])],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    # pure-python install still works; kernels fall back to numpy
    extensions = []

setup(ext_modules=extensions)
