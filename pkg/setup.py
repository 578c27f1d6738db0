from setuptools import Extension, setup

# The MPFR step loop is optional: without it the pure-Python stepper is used.
setup(
    ext_modules=[
        Extension(
            "quadseries._kernel",
            sources=["src/quadseries/_kernel.c"],
            libraries=["mpfr", "gmp"],
            extra_compile_args=["-O2"],
            optional=True,
        )
    ]
)
