import pytest
import torch

from biddiff.config import Config

torch.set_num_threads(2)


def rand_image(*shape, seed=0, lo=0.0, hi=1.0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=gen) * (hi - lo) + lo


@pytest.fixture
def mini_config():
    """Small everything: fast enough for per-test training loops."""
    return Config(
        steps=4,
        batch_size=2,
        patch_size=16,
        timesteps=50,
        base_channels=8,
        channel_mults=(1, 2),
        num_res_blocks=1,
        afi_levels=(1,),
        time_embed_dim=16,
        feature_base=4,
        racm_width=8,
        sample_steps=4,
        log_every=2,
        checkpoint_every=2,
    )


def make_pair_dir(tmp_path, n=3, size=24, seed=0, identical=False):
    """Tiny on-disk low/high dataset for loader and training tests."""
    from biddiff.dataset import DegradationParams, make_synthetic_set, synthesize_source_images

    srcs = synthesize_source_images(n, size=size, seed=seed)
    params = DegradationParams(seed=seed)
    root = tmp_path / "data"
    make_synthetic_set(srcs, n, params, root)
    if identical:
        import shutil

        for p in (root / "high").glob("*.png"):
            shutil.copy(p, root / "low" / p.name)
    return root
