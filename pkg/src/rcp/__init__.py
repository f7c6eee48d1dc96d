"""Rectified conformal prediction.

Split conformal prediction with a trainable, monotone transformation of the
conformity score.  The transformation is anchored at an estimate of the
conditional score quantile, which improves conditional coverage while the
final conformal step keeps marginal coverage exact.

Subpackage layout:

- ``core``         datasets, splits, seeded randomness
- ``adjustments``  the parametric transformation families and their inverses
- ``scores``       conformity scores and the geometry of their sublevel sets
- ``quantile``     pinball loss, conformal/weighted quantiles, conditional
                   quantile estimators (local kernel, neural, constant)
- ``nnet``         minimal from-scratch MLP with MSE / pinball / mixture-NLL
                   losses and an Adam optimizer
- ``calibrate``    SCP and rectified-CP calibration, membership queries
- ``metrics``      coverage, worst-slab coverage, conditional coverage error,
                   prediction-set volume
- ``datagen``      synthetic benchmarks and their analytic oracles
- ``harness``      experiment configs, CSV I/O, benchmark runner, theory checks
"""

from rcp.core import LabeledDataset, Rng, SplitSpec, split_calibration, split_dataset
from rcp.adjustments import AdjustmentFamily, DomainError
from rcp.calibrate import RcpModel, ScpModel, rcp_calibrate, scp_calibrate

__all__ = [
    "AdjustmentFamily",
    "DomainError",
    "LabeledDataset",
    "RcpModel",
    "Rng",
    "ScpModel",
    "SplitSpec",
    "rcp_calibrate",
    "scp_calibrate",
    "split_calibration",
    "split_dataset",
]

__version__ = "0.1.0"
