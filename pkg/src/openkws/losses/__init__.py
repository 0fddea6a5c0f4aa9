"""Loss zoo with string-keyed registries for ablation configs."""

from .phoneme import (
    PHONEME_LOSS_KINDS,
    AsyPParams,
    asyp_phoneme_loss,
    baseline_phoneme_loss,
    clat_phoneme_loss,
    else_term,
    msp_term,
    proxy_bd_phoneme_loss,
    proxy_ms_phoneme_loss,
    triplet_phoneme_loss,
)
from .relational import (
    RpLossWeights,
    rp_angle_loss,
    rp_distance_loss,
    rp_proto_loss,
    utterance_rp_loss,
)
from .classification import (
    CLASSIFIER_KINDS,
    AamSoftmaxHead,
    SphereFace2Head,
    keyword_triplet_loss,
)

# Every selectable loss, addressable by the key used in run configs.
LOSS_REGISTRY = {
    "asyp": asyp_phoneme_loss,
    "asyp_adams": asyp_phoneme_loss,  # same form; per-class params become learnable
    "proxy_ms": proxy_ms_phoneme_loss,
    "proxy_bd": proxy_bd_phoneme_loss,
    "clat": clat_phoneme_loss,
    "triplet": triplet_phoneme_loss,
    "rp": utterance_rp_loss,
}

__all__ = [
    "PHONEME_LOSS_KINDS",
    "CLASSIFIER_KINDS",
    "LOSS_REGISTRY",
    "AsyPParams",
    "AamSoftmaxHead",
    "SphereFace2Head",
    "RpLossWeights",
    "asyp_phoneme_loss",
    "baseline_phoneme_loss",
    "clat_phoneme_loss",
    "else_term",
    "msp_term",
    "proxy_bd_phoneme_loss",
    "proxy_ms_phoneme_loss",
    "triplet_phoneme_loss",
    "rp_angle_loss",
    "rp_distance_loss",
    "rp_proto_loss",
    "utterance_rp_loss",
    "keyword_triplet_loss",
]
