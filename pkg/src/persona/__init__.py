"""persona: joint emotion/gender/age prediction from speech features.

Submodules:
  audio      WAV decoding, mixdown, 16 kHz resampling
  features   MFCC pipeline and PERS embedding files
  nn         layer algebra with hand-derived gradients, Adam, grad checking
  model      shared-trunk multi-task network
  training   manifests, k-fold protocol, fold trainer
  store      binary model persistence
  service    HTTP inference API
  cli        operator command line
"""

__version__ = "0.1.0"
