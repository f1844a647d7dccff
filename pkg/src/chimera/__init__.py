"""Zero-shot semantic segmentation by partial vision-language distillation.

A trainable dense backbone is bridged into a frozen vision-language
embedding space through a semantic head whose frozen pieces come from a
vision-language weight bundle.  Training combines segmentation on pseudo
masks, selective global distillation against the image CLS token, and a
prototype-to-text alignment loss.  Evaluation reports harmonic IoU over a
seen/unseen class split.
"""

__version__ = "0.1.0"
