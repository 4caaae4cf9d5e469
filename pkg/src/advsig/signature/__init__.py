"""Perturbation estimation and signature classifiers."""

from .classifier import (
    DETECTION_LABELS,
    EMBEDDING_DIM,
    SIG_ARCHS,
    TASKS,
    VICTIM_LABELS,
    ClassifierConfig,
    SignatureClassifier,
    assign_label,
    centroid_separability,
    classify,
    export_embeddings,
    label_space_for,
    load_classifier,
    save_classifier,
    score_split,
    train_signature_classifier,
)
from .denoiser import (
    Denoiser,
    DenoiserConfig,
    MRSTFTLoss,
    PerturbationEstimate,
    denoise,
    estimate_perturbation,
    load_denoiser,
    paired_examples,
    save_denoiser,
    train_denoiser,
)
