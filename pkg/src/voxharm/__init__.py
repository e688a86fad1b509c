"""voxharm: CT intensity harmonization, preprocessing, and evaluation.

The package builds merged training datasets from two CT collections with
different intensity distributions: it remaps label vocabularies, harmonizes
the source intensities onto the target domain (affine moment shift or
empirical histogram matching), applies the shared percentile-clip /
z-normalize / isotropic-resample chain, and scores segmentations with
hierarchical region Dice.
"""

__version__ = "0.1.0"

from .analysis import CdfDistance, Histogram, build_histogram, cdf_distance, emit_plot_data
from .core import (DatasetStats, GeometryMismatchError, LabelMap, RegionSpec, Volume,
                   compute_stats, extract_region_mask)
from .evaluation import DEFAULT_REGIONS, EvalReport, dice, evaluate_case, evaluate_dataset
from .nifti import (NiftiFormatError, NiftiHeaderView, read_header, read_labels,
                    read_volume, write_labels, write_volume)
from .phantom import (EllipsoidClass, GaussianMixture, PhantomSpec,
                      default_source_spec, default_target_spec, generate_phantom,
                      generate_phantoms)
from .pipeline import (ConfigError, PipelineConfig, PipelineError, dataset1_config,
                       dataset2_config, load_config, load_preset, run_pipeline)
from .resample import ResampleSpec, resample_labels, resample_volume
from .transforms import (IntensityMap, LabelRemap, apply_map, clip_percentiles,
                         clip_thresholds, fit_histogram_match, fit_moment_shift,
                         remap_labels, znormalize)

__all__ = [
    "__version__",
    "Volume", "LabelMap", "DatasetStats", "RegionSpec", "GeometryMismatchError",
    "compute_stats", "extract_region_mask",
    "NiftiFormatError", "NiftiHeaderView", "read_header",
    "read_volume", "write_volume", "read_labels", "write_labels",
    "Histogram", "CdfDistance", "build_histogram", "cdf_distance", "emit_plot_data",
    "IntensityMap", "LabelRemap", "fit_moment_shift", "fit_histogram_match",
    "apply_map", "clip_thresholds", "clip_percentiles", "znormalize", "remap_labels",
    "ResampleSpec", "resample_volume", "resample_labels",
    "EvalReport", "DEFAULT_REGIONS", "dice", "evaluate_case", "evaluate_dataset",
    "GaussianMixture", "EllipsoidClass", "PhantomSpec",
    "generate_phantom", "generate_phantoms",
    "default_source_spec", "default_target_spec",
    "ConfigError", "PipelineError", "PipelineConfig",
    "load_config", "load_preset", "dataset1_config", "dataset2_config", "run_pipeline",
]
