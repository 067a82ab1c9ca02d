"""Local calibration error, local recalibration, and their downstream checks."""

from .binning import BinningScheme, bin_index, equal_mass, equal_width
from .dataset import (AlignmentError, Dataset, FeatureMatrix, PredictionRecord, SchemaError,
                      ValidationError, load_dataset, load_features, load_predictions,
                      write_predictions)
from .decision import CostSpec, cost_sweep, prr, run_policy
from .kernel import KernelSpec, PcaTransform, apply_pca, eval_kernel, fit_pca
from .metrics import (BinStats, LceReport, bin_stats, brier, ece, group_mce, lce_at,
                      lce_landscape, mce, mlce, nll, pearson, slce_at)
from .recalib import (apply_groupwise, apply_hb, apply_ir, apply_lore, apply_ts, fit_groupwise,
                      fit_hb, fit_ir, fit_lore, fit_ts, load_recalibrator, recalibrate_dataset,
                      save_recalibrator)

__version__ = "0.1.0"
