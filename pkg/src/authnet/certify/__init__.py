"""Certified bounds, authentication/refuse radii and embedding analysis."""

from authnet.certify.bounds import (
    BOUNDS,
    BoundPair,
    LinearBounds,
    UnsupportedLayerError,
    crown_bounds,
    crown_full_bounds,
    crown_layers,
    crown_linear,
    interval_bounds,
    interval_layers,
    relu_relaxation,
)
from authnet.certify.domains import (
    FakeKeySet,
    RadiusResult,
    RefuseDomain,
    RefuseProfile,
    auth_radius,
    gen_fake_keys,
    mean_auth_radius,
    refuse_accuracy_profile,
    refuse_domain,
    refuse_radius,
    sample_ball,
)
from authnet.certify.embed import DensityGrid, Embedding, Occupancy, kde_density, pca_embed, refuse_occupancy

__all__ = [
    "BOUNDS", "BoundPair", "LinearBounds", "UnsupportedLayerError", "crown_bounds", "crown_full_bounds",
    "crown_layers", "crown_linear",
    "interval_bounds", "interval_layers", "relu_relaxation", "FakeKeySet", "RadiusResult", "RefuseDomain",
    "RefuseProfile", "auth_radius", "gen_fake_keys", "mean_auth_radius", "refuse_accuracy_profile",
    "refuse_domain", "refuse_radius", "sample_ball", "DensityGrid", "Embedding", "Occupancy", "kde_density",
    "pca_embed", "refuse_occupancy",
]
