from bytestack.config import StageConfig
from bytestack.stages.ssm import SsmStage
from bytestack.stages.transformer import TransformerStage


def build_stage(cfg: StageConfig):
    if cfg.kind == "transformer":
        return TransformerStage(cfg.width, cfg.layers, cfg.heads, cfg.ff_mult, cfg.dropout,
                                rotary=cfg.pos_embedding == "rotary")
    if cfg.kind == "selective_ssm":
        return SsmStage(cfg.width, cfg.layers, cfg.state_size, cfg.ff_mult, cfg.dropout, cfg.scan)
    raise ValueError(f"unknown stage kind {cfg.kind!r}")


__all__ = ["build_stage", "SsmStage", "TransformerStage"]
