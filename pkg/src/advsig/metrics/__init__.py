"""AUC / EER / accuracy, confusion matrices and the leave-one-attack-out harness."""

from .loao import SLICES, AblationRow, run_loao, slice_mask, write_scores_csv
from .scores import (
    confusion_and_accuracy,
    detection_accuracy,
    detection_report,
    eer,
    most_confused_pair,
    roc_auc,
    write_confusion_csv,
)
