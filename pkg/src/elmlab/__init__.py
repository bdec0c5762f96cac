"""Desk-scale image generation with binary tokenizers and language models.

Modules, bottom up: ``tensor`` (autodiff), ``data`` (toy corpora),
``tokenizer`` (BAE and VQ), ``vocab`` (code decomposition), ``model``
(AR / MLM transformer), ``sampling`` (guidance, top-k, MaskGIT, sliding
window), ``analysis`` (token statistics, attention, Fréchet proxy), ``cli``.
"""

from .errors import ConfigError, ContractError, ElmError, FormatError, NumericalError, TrainingDiverged

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "ElmError", "FormatError", "NumericalError", "TrainingDiverged",
           "__version__"]
