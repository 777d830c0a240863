import hashlib
import json

import pytest
import torch

from biddiff.dataset import (
    DegradationParams,
    PairedDirDataset,
    PairedSample,
    degrade,
    load_image,
    load_paired_dir,
    make_synthetic_set,
    save_image,
    synthesize_source_images,
)

from conftest import rand_image


def identity_params(seed=0):
    return DegradationParams(
        gamma_range=(1.0, 1.0),
        scale_range=(1.0, 1.0),
        noise_sigma_range=(0.0, 0.0),
        color_cast_strength=(0.0, 0.0),
        seed=seed,
    )


class TestDegradationParams:
    def test_defaults_valid(self):
        DegradationParams()

    def test_rejects_inverted_range(self):
        with pytest.raises(ValueError):
            DegradationParams(gamma_range=(3.0, 1.5))

    def test_rejects_nonpositive_gamma(self):
        with pytest.raises(ValueError):
            DegradationParams(gamma_range=(0.0, 1.0))

    def test_rejects_negative_noise(self):
        with pytest.raises(ValueError):
            DegradationParams(noise_sigma_range=(-0.1, 0.1))


class TestDegrade:
    def test_identity_parameters(self):
        x = rand_image(2, 3, 8, 8, seed=0)
        out = degrade(x, identity_params(), sample_seed=5)
        assert torch.equal(out, x)

    def test_pure_scale_on_white(self):
        params = DegradationParams(
            gamma_range=(2.0, 2.0),
            scale_range=(0.25, 0.25),
            noise_sigma_range=(0.0, 0.0),
            color_cast_strength=(0.0, 0.0),
        )
        out = degrade(torch.ones(1, 3, 8, 8), params, sample_seed=1)
        assert torch.allclose(out, torch.full_like(out, 0.25))

    def test_deterministic_given_seeds(self):
        x = rand_image(1, 3, 16, 16, seed=1)
        params = DegradationParams(seed=9)
        a = degrade(x, params, sample_seed=4)
        b = degrade(x, params, sample_seed=4)
        assert torch.equal(a, b)
        c = degrade(x, params, sample_seed=5)
        assert not torch.equal(a, c)

    def test_output_in_range(self):
        x = rand_image(1, 3, 16, 16, seed=2)
        out = degrade(x, DegradationParams(), sample_seed=0)
        assert out.min() >= 0 and out.max() <= 1

    def test_rejects_out_of_range_input(self):
        with pytest.raises(ValueError):
            degrade(torch.full((1, 3, 4, 4), 2.0), DegradationParams(), 0)

    def test_accepts_single_image(self):
        out = degrade(rand_image(3, 8, 8, seed=3), DegradationParams(), 0)
        assert out.shape == (3, 8, 8)


def _dir_hashes(root):
    out = {}
    for p in sorted(root.rglob("*.png")):
        out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


class TestMakeSyntheticSet:
    def test_count_and_manifest(self, tmp_path):
        srcs = synthesize_source_images(1, size=32, seed=0)
        manifest = make_synthetic_set(srcs, 8, DegradationParams(seed=0), tmp_path / "d")
        assert len(manifest) == 8
        assert len(list((tmp_path / "d" / "low").glob("*.png"))) == 8
        assert len(list((tmp_path / "d" / "high").glob("*.png"))) == 8
        lines = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 8
        entry = json.loads(lines[0])
        assert set(entry) == {"id", "seed", "gamma", "scale", "sigma", "cast"}

    def test_replay_is_bit_identical(self, tmp_path):
        srcs = synthesize_source_images(2, size=32, seed=3)
        params = DegradationParams(seed=3)
        make_synthetic_set(srcs, 4, params, tmp_path / "a")
        make_synthetic_set(srcs, 4, params, tmp_path / "b")
        ha, hb = _dir_hashes(tmp_path / "a"), _dir_hashes(tmp_path / "b")
        assert ha == hb

    def test_lows_darker_than_highs(self, tmp_path):
        srcs = synthesize_source_images(4, size=32, seed=1)
        make_synthetic_set(srcs, 8, DegradationParams(seed=1), tmp_path / "d")
        ds = PairedDirDataset(tmp_path / "d")
        low_mean = torch.stack([ds.load_pair(i)[0].mean() for i in range(8)]).mean()
        high_mean = torch.stack([ds.load_pair(i)[1].mean() for i in range(8)]).mean()
        assert low_mean < high_mean

    def test_generate_load_round_trip(self, tmp_path):
        # written files quantize to 8 bits; loading them must reproduce the
        # quantized tensors exactly
        srcs = synthesize_source_images(1, size=16, seed=5)
        params = DegradationParams(seed=5)
        make_synthetic_set(srcs, 2, params, tmp_path / "d")
        for i in range(2):
            regenerated = degrade(srcs[0], params, sample_seed=i)
            quantized = (regenerated.clamp(0, 1) * 255).round() / 255
            loaded = load_image(tmp_path / "d" / "low" / f"{i:04d}.png")
            assert torch.allclose(loaded, quantized, atol=1e-6)


class TestSynthesizeSources:
    def test_range_and_shape(self):
        imgs = synthesize_source_images(3, size=24, seed=2)
        assert len(imgs) == 3
        for im in imgs:
            assert im.shape == (3, 24, 24)
            assert im.min() >= 0 and im.max() <= 1

    def test_seeded_determinism(self):
        a = synthesize_source_images(2, size=16, seed=7)
        b = synthesize_source_images(2, size=16, seed=7)
        assert all(torch.equal(x, y) for x, y in zip(a, b))
        c = synthesize_source_images(2, size=16, seed=8)
        assert not torch.equal(a[0], c[0])


class TestPairedDirDataset:
    def test_identical_pair_yields_identical_crops(self, tmp_path):
        root = tmp_path / "d"
        img = rand_image(3, 24, 24, seed=4)
        save_image(img, root / "low" / "a.png")
        save_image(img, root / "high" / "a.png")
        batch = PairedDirDataset(root).batch_at(0, 2, 16, seed=1)
        assert torch.equal(batch.x_l, batch.x_h)

    def test_full_size_patch_is_whole_image(self, tmp_path):
        root = tmp_path / "d"
        img = rand_image(3, 16, 16, seed=5)
        save_image(img, root / "low" / "a.png")
        save_image(img, root / "high" / "a.png")
        batch = PairedDirDataset(root).batch_at(0, 1, 16, seed=0)
        loaded = load_image(root / "low" / "a.png")
        assert torch.equal(batch.x_l[0], loaded)

    def test_fixed_seed_reproducible_sequence(self, tmp_path):
        root = tmp_path / "d"
        for name in ("a", "b", "c"):
            save_image(rand_image(3, 24, 24, seed=hash(name) % 100), root / "low" / f"{name}.png")
            save_image(rand_image(3, 24, 24, seed=hash(name) % 100 + 1), root / "high" / f"{name}.png")
        seq1 = list(load_paired_dir(root, 8, seed=3, batch_size=2, num_batches=4))
        seq2 = list(load_paired_dir(root, 8, seed=3, batch_size=2, num_batches=4))
        for b1, b2 in zip(seq1, seq2):
            assert torch.equal(b1.x_l, b2.x_l) and torch.equal(b1.x_h, b2.x_h)
            assert b1.id == b2.id

    def test_orphans_listed(self, tmp_path):
        root = tmp_path / "d"
        save_image(rand_image(3, 8, 8, seed=0), root / "low" / "a.png")
        save_image(rand_image(3, 8, 8, seed=0), root / "high" / "a.png")
        save_image(rand_image(3, 8, 8, seed=0), root / "low" / "orphan.png")
        with pytest.raises(ValueError, match="orphan.png"):
            PairedDirDataset(root)

    def test_undersized_image_named(self, tmp_path):
        root = tmp_path / "d"
        save_image(rand_image(3, 8, 8, seed=0), root / "low" / "tiny.png")
        save_image(rand_image(3, 8, 8, seed=0), root / "high" / "tiny.png")
        with pytest.raises(ValueError, match="tiny.png"):
            PairedDirDataset(root).batch_at(0, 1, 16, seed=0)

    def test_crop_windows_aligned(self, tmp_path):
        # plant a unique marker pixel at the same place in both images; any
        # crop must contain it at the same offset in low and high
        root = tmp_path / "d"
        low = torch.zeros(3, 24, 24)
        high = torch.zeros(3, 24, 24)
        low[:, 11, 13] = 1.0
        high[:, 11, 13] = 1.0
        save_image(low, root / "low" / "m.png")
        save_image(high, root / "high" / "m.png")
        ds = PairedDirDataset(root)
        found = 0
        for i in range(20):
            b = ds.batch_at(i, 1, 12, seed=2)
            pos_l = (b.x_l[0, 0] == 1.0).nonzero()
            pos_h = (b.x_h[0, 0] == 1.0).nonzero()
            assert pos_l.shape == pos_h.shape
            if len(pos_l):
                found += 1
                assert torch.equal(pos_l, pos_h)
        assert found > 0

    def test_augment_flips_both_sides_together(self, tmp_path):
        root = tmp_path / "d"
        img = torch.zeros(3, 16, 16)
        img[:, :, 0] = 1.0  # bright left column
        save_image(img, root / "low" / "a.png")
        save_image(img, root / "high" / "a.png")
        ds = PairedDirDataset(root)
        flipped = 0
        for i in range(10):
            b = ds.batch_at(i, 1, 16, augment=True, seed=5)
            assert torch.equal(b.x_l, b.x_h)
            if b.x_l[0, 0, 0, -1] == 1.0:
                flipped += 1
        assert 0 < flipped < 10

    def test_range_discipline(self, tmp_path):
        from conftest import make_pair_dir

        root = make_pair_dir(tmp_path, n=2, size=20, seed=6)
        b = PairedDirDataset(root).batch_at(0, 4, 12, seed=0)
        for x in (b.x_l, b.x_h):
            assert x.min() >= 0 and x.max() <= 1
        assert b.source == "disk"
        assert len(b.id) == 4

    def test_missing_layout_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            PairedDirDataset(tmp_path / "nope")


def test_paired_sample_shape_check():
    with pytest.raises(ValueError):
        PairedSample(
            x_l=torch.zeros(1, 3, 4, 4), x_h=torch.zeros(1, 3, 8, 8), id=("a",), source="disk"
        )


def test_save_load_round_trip(tmp_path):
    img = rand_image(3, 10, 12, seed=9)
    save_image(img, tmp_path / "x.png")
    loaded = load_image(tmp_path / "x.png")
    assert loaded.shape == img.shape
    assert (loaded - img).abs().max() <= 1.0 / 255.0 + 1e-6
