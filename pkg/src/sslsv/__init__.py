"""Self-supervised speaker verification in plain numpy.

Modules: ``audio_io`` (WAV, cropping), ``augment`` (noise/reverb), ``features``
(log-mel), ``nn`` (encoder, SAP, projector with hand-written backprop),
``losses`` (InfoNCE, Barlow Twins, VICReg and composites), ``optim`` (Adam,
schedule, early stopping), ``trainer``, ``eval`` (EER, minDCF, probe,
fine-tune), ``synth`` (synthetic corpus) and ``cli``.
"""

__version__ = "0.1.0"
