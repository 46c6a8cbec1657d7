"""A run configuration small enough to train for a handful of steps inside a unit test."""
from refvid.config import RunConfig

TINY_MODEL = dict(width=32, depth=1, heads=2, K=4, M=16, frames=2, frame_size=16, ref_size=8, aligner_layers=1,
                  aligner_width=16, aligner_heads=2, mllm_width=64, mllm_inner=16, T_diff=10)


def tiny_config(**train) -> RunConfig:
    t = dict(steps=6, base_lr=1e-3, warmup_steps=2, vae_steps=50, checkpoint_every=3, aligner_init="random")
    t.update(train)
    return RunConfig().with_overrides(model=TINY_MODEL, train=t, pretrain=dict(steps=20, warmup_steps=2),
                                      data=dict(n_clips=3, max_sprites=2), eval=dict(n_clips=2))
