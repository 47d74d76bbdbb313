from setuptools import Extension, setup

# The compiled kernel module is optional: the package falls back to the
# numpy implementations in mldrkd._kernels_np when it is absent.
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "mldrkd._fastkernels",
                ["src/mldrkd/_fastkernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
