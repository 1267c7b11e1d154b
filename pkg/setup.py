import logging

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Skip the compiled kernels when no compiler is present; numpy fallback covers them."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            logging.warning("compiled kernels not built (%s); using numpy fallback", exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            logging.warning("failed to build %s (%s); using numpy fallback", ext.name, exc)


try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("aranet._kernels", ["src/aranet/_kernels.pyx"], extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # noqa: BLE001
    logging.warning("Cython unavailable or failed (%s); using numpy fallback", exc)
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
