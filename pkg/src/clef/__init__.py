"""Two-stage text-driven contrastive learning at desk scale.

Stage one pre-trains tiny image/text encoders with activity-based
weakly-supervised contrastive pairing; stage two fine-tunes against label
names and descriptions, enabling similarity-based prediction and zero-shot
transfer from label descriptions.
"""

__version__ = "0.1.0"
