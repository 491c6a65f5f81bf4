"""Dataset layer: patient records, preprocessing, the RV1 volume format,
stratified splitting, and the synthetic dual-modality phantom generator."""

from .records import (Modality, PatientRecord, SliceSample, WindowSpec,
                      crop_roi, ground_truth_mask, make_slices, minmax_norm,
                      pet_norm, window_ct)
from .phantom import generate_phantom_cohort
from .rv1 import (read_cohort, read_cohort_index, read_cohort_stages,
                  read_patient, validate_cohort, write_cohort, write_patient)
from .splits import SplitManifest, stratified_split

__all__ = [
    "Modality",
    "PatientRecord",
    "SliceSample",
    "SplitManifest",
    "WindowSpec",
    "crop_roi",
    "generate_phantom_cohort",
    "ground_truth_mask",
    "make_slices",
    "minmax_norm",
    "pet_norm",
    "read_cohort",
    "read_cohort_index",
    "read_cohort_stages",
    "read_patient",
    "stratified_split",
    "validate_cohort",
    "window_ct",
    "write_cohort",
    "write_patient",
]
