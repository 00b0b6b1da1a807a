"""Masked-autoencoder video anomaly detection, desk scale.

Train a transformer autoencoder on normal-only video to predict the next
frame, synthesize pseudo anomalies by replacing random patch embeddings
with a mask token, optionally tie the two branches together with a
symmetric-KL feature consistency term, and score test frames by
prediction error (PSNR) against frame-level labels (AUROC).
"""

__version__ = "0.1.0"
