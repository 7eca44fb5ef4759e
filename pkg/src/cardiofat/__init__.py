"""Automatic epicardial and mediastinal fat segmentation for cardiac CT.

The pipeline registers scans to a common frame by matching a retrosternal
atlas with weighted mutual information plus a walk-based confirmation, then
classifies every fat-range pixel with a bagged forest of information-gain
trees trained on windowed texture features.
"""

from .imaging import (
    CtScan,
    FatLabel,
    FatWindow,
    HuSlice,
    LabelMask,
    apply_fat_window,
    fat_area,
    fat_volume,
    load_mask,
    load_scan,
    rescale_scan,
    rescale_to_spacing,
    save_mask,
    save_scan,
    window_fat,
)
from .registration import (
    Atlas,
    ConfirmParams,
    LandmarkCandidate,
    RegistrationTransform,
    build_atlas,
    confirm_candidate,
    load_atlas,
    locate_retrosternal,
    register_scan,
    save_atlas,
    wmi,
)
from .features import (
    ATTRIBUTE_NAMES,
    CLASS_VALUES,
    Dataset,
    FeatureParams,
    build_dataset,
    center_of_gravity,
    csv,
    extract_window,
    geometric_moments,
    glcm_moments,
    run_length_stats,
)
from .arff import read_arff, write_arff
from .forest import (
    DecisionTree,
    Forest,
    load_model,
    predict,
    predict_labels,
    predict_proba,
    save_model,
    segment_scan,
    train_forest,
    train_tree,
)
from .evaluation import (
    ClassMetrics,
    ConfusionMatrix,
    confusion_and_rates,
    cross_validate,
    dice,
    percentage_split,
    report,
)
from .phantom import Phantom, PhantomGeometry, generate_corpus, generate_phantom

__version__ = "0.1.0"
