"""Python surface of the distillation laboratory.

The compiled core lives in ``_ildlab``. Installed builds carry it inside the
package; in-tree test runs put the build directory on ``PYTHONPATH`` instead.
"""

try:
    from ._ildlab import *  # noqa: F401,F403
    from ._ildlab import __version__  # noqa: F401
except ImportError:  # build-tree layout
    from _ildlab import *  # noqa: F401,F403
    from _ildlab import __version__  # noqa: F401
