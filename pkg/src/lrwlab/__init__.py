"""Learned-reweighting classifier training with meta-optimized validation-set
selection, plus an exhaustive enumeration oracle for the finite equivalence
between adversarial split discovery and worst-case-subset robust training.

Modules:
    autodiff    reverse-mode autodiff over numpy float64 (explicit tape)
    datagen     synthetic datasets, label noise, class skew, CSV io
    models      classifier / instance-weight / splitter MLPs + checkpoints
    hardness    probabilistic margins and hard/easy/random split carving
    trainer     ERM, fixed-split reweighted training, and the min-max loop
    dro_oracle  exhaustive finite-instance enumeration oracle
    metrics     accuracy, paired margin deltas, ordering checks, reports
    experiments experiment orchestration and artifact layout
    cli         argparse front door (gen-data / run / compare / oracle)
"""

__version__ = "0.1.0"
