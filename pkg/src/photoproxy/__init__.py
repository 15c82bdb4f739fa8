"""Screen-photo proxies for medical images: simulate, rectify, restore, evaluate.

Submodules: core_image, metrics, geometry, degrade, nn, dncnn, classifier,
roc, evaluation, cli.
"""

__version__ = "0.1.0"
