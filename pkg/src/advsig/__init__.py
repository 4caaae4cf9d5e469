"""Adversarial-attack signatures for speaker identification.

Generate untargeted white-box attacks against speaker-ID victims, build
threat datasets from them, and train classifiers that detect attacks,
name the attack type, and identify the attacked victim model.
"""

__version__ = "0.1.0"
