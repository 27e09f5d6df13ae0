# -*- coding: utf-8 -*-
"""Perceptual-quality based multi-label training.

Training samples of low perceptual quality are pooled and given several
cluster-generated labels, then models trained on the result are compared with
clean, noisy and human multi-label training under rotation and corruption shifts.

Pipeline:
    images -> quality scores -> pool + generated labels -> training -> shift suites

Modules:
    - data_io: CIFAR-10 binaries, label files, synthetic gratings, CSVs, checkpoints
    - quality: BRISQUE-style features and Mahalanobis quality scores
    - clustering: k-means label model
    - pool: training-label conditions and train pairs
    - model: small CNN with vanilla, MC-Dropout and DUQ heads
    - shifts: rotation and corruption suites
    - harness: orchestration, reports and acceptance checks
"""

__version__ = "1.0.0"
