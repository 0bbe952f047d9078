"""Session-aware query suggestion on a hierarchical transformer.

The heavy lifting lives in the compiled ``_pymtn`` extension; this package
re-exports its surface: config profiles, the session data pipeline, model
construction, training, decoding, metrics, checkpoints, and the closed-form
verification suite.
"""

from ._pymtn import *  # noqa: F401,F403
from ._pymtn import __version__  # noqa: F401
