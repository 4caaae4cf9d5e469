"""Untargeted white-box attacks and Lp-ball geometry."""

from .cw import cw, cw_batch
from .gradient import (
    attack,
    attack_success,
    derived_seed,
    fgsm,
    iter_fgsm,
    pgd,
    pgd_batch,
    run_attack_batch,
)
from .lp import grad_step_direction, project_lp, random_in_ball, topk_count
from .spec import (
    ATTACK_LABELS,
    FAMILIES,
    INF,
    MULTI_VM_ATTACKS,
    VALID_NORMS,
    AdversarialExample,
    AttackSpec,
    label_for,
    lp_norm,
    parse_label,
    parse_norm,
    snr_db,
)
