"""Active-learning bias lab for depth-uncertainty networks.

Modules: ``numerics`` (tensor engine), ``network``/``dun``/``mcdo`` (models),
``estimators`` and ``acquisition`` (risk estimators and BALD sampling),
``data``, ``harness``, ``plotting`` and ``cli``.
"""

__version__ = "0.1.0"
