"""Spectral-mapping speech enhancement with a frozen-classifier mimic loss.

Modules: ``tensor``/``ops``/``gradcheck`` (autodiff core), ``kernels``
(compiled conv kernels with a NumPy fallback), ``dsp`` (feature pipeline),
``models`` (the two mappers and two classifiers), ``training`` (losses,
Adam, the two-stage protocol), ``synth`` (synthetic corpus), ``formats``
(binary file formats) and ``cli`` (the batch driver).
"""

__version__ = "0.1.0"
