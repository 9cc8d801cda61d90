"""
Brain age estimation from two tabular neuroimaging modalities.

Dual encoders split each modality's latent code into generic and unique parts,
cross-reconstruct, and feed a fused code to an age regressor and a sex classifier.
"""

__version__ = "1.0.0"
