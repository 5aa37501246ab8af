"""Audio-visual fusion classifiers on precomputed 768-d features.

Library layout:
  autodiff    - float64 tensors with reverse-mode gradients
  data        - SNFR1 feature files, stratified folds, synthetic datasets
  models      - the eight model variants and checkpoint I/O
  training    - AdamW, early-stopped epoch loop, k-fold cross-validation
  evaluation  - confusion matrix, per-class recall/F1/AUC, embedding export
  report      - text/CSV tables and matplotlib figures for CLI reports
  cli         - `snifr` command line entry point
"""

__version__ = "0.1.0"
