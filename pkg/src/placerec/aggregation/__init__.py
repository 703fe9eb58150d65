from .base import FeatureMap, Head, as_tokens
from .gem import (
    G2mHead,
    G2mParams,
    GcaParams,
    GemHead,
    GemParams,
    g2m_forward,
    g2m_weight_count,
    gca_gate,
    gem_pool,
)
from .netvlad import (
    CLS_DIM,
    NetVladHead,
    NetVladParams,
    NvlHead,
    NvlParams,
    netvlad_forward,
    netvlad_residual_matrix,
    nvl_cls_forward,
    nvl_forward,
)
from .pca import PcaModel, RankDeficientError, pca_apply, pca_fit

HEADS = {cls.kind: cls for cls in (GemHead, G2mHead, NetVladHead, NvlHead)}


def head_from_config(config: dict, params: dict) -> Head:
    kind = config["kind"]
    if kind not in HEADS:
        raise ValueError(f"unknown head kind {kind!r}")
    if kind == "nvl":
        return NvlHead(params, use_projection=config.get("use_projection", True))
    return HEADS[kind](params)


__all__ = [
    "CLS_DIM", "FeatureMap", "G2mHead", "G2mParams", "GcaParams", "GemHead", "GemParams", "HEADS", "Head",
    "NetVladHead", "NetVladParams", "NvlHead", "NvlParams", "PcaModel", "RankDeficientError", "as_tokens",
    "g2m_forward", "g2m_weight_count", "gca_gate", "gem_pool", "head_from_config", "netvlad_forward",
    "netvlad_residual_matrix", "nvl_cls_forward", "nvl_forward", "pca_apply", "pca_fit",
]
