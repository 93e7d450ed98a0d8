"""End-to-end codec tests.

The strongest check here is algebraic: a decoded clip must equal, bit for
bit, the inverse transform of the encoder's own quantized pyramids.  That
holds only if every transmitted token survives the entropy coder and every
probability is computed identically on both ends.
"""

import dataclasses
import json

import numpy as np
import pytest

from pgvc.container import read_container, truncate
from pgvc.ctxmodel import ModelConfig, init_params, zero_params
from pgvc.errors import (
    ConfigError,
    ContractError,
    DecodeError,
    ModelError,
    ShapeError,
)
from pgvc.frontend import FrontendConfig, VideoClip, reconstruct_video
from pgvc.msrq import ScaleSchedule, ScaleSpec, default_schedule, ms_dequantize
from pgvc.pipeline import (
    CodecConfig,
    PSNR_CAP,
    SYNTH_KINDS,
    decode_video,
    encode_video,
    generate_scale,
    pad_to_blocks,
    psnr,
    pyramids_from_clip,
    select_kappa,
    synth_clip,
)
from pgvc.ctxmodel import ProbTensor


SMALL_MODEL = ModelConfig(d=8, n_blocks=1, n_heads=2, max_scales=4, bit_length=48)


def small_cfg(**kwargs) -> CodecConfig:
    return CodecConfig(model=SMALL_MODEL, **kwargs)


def expected_pixels(clip: VideoClip, cfg: CodecConfig) -> np.ndarray:
    """What a full-kappa decode must reproduce exactly: the inverse
    transform of the encoder's own quantized pyramids, cropped."""

    schedule, intra, inter = pyramids_from_clip(clip, cfg)
    latent = ms_dequantize(intra, len(schedule))
    if inter is not None:
        latent = np.concatenate([latent, ms_dequantize(inter, len(schedule))], axis=0)
    recon = reconstruct_video(latent, cfg.frontend)
    return recon.pixels[:, : clip.height, : clip.width, :]


class TestSynthClips:
    def test_shapes_and_dtype(self):
        for kind in SYNTH_KINDS:
            clip = synth_clip(3, 12, 8, 4, kind=kind)
            assert clip.pixels.shape == (4, 8, 12, 3)
            assert clip.pixels.dtype == np.uint8

    def test_deterministic(self):
        for kind in SYNTH_KINDS:
            a = synth_clip(7, 10, 6, 3, kind=kind)
            b = synth_clip(7, 10, 6, 3, kind=kind)
            assert np.array_equal(a.pixels, b.pixels)

    def test_seeds_differ(self):
        a = synth_clip(0, 16, 16, 2, kind="noise_floor")
        b = synth_clip(1, 16, 16, 2, kind="noise_floor")
        assert not np.array_equal(a.pixels, b.pixels)

    def test_gradient_moves_by_constant_shift(self):
        # The gradient pattern translates rigidly with wrap-around, so some
        # fixed (vy, vx) must roll frame t onto frame t+1 for every t.
        clip = synth_clip(11, 16, 12, 5, kind="moving_gradient")
        f = clip.pixels
        shift = None
        for vy in (1, 2):
            for vx in (1, 2):
                if np.array_equal(np.roll(f[0], (vy, vx), axis=(0, 1)), f[1]):
                    shift = (vy, vx)
        assert shift is not None
        for t in range(4):
            rolled = np.roll(f[t], shift, axis=(0, 1))
            assert np.array_equal(rolled, f[t + 1])

    def test_blobs_move_coherently(self):
        # consecutive frames overlap far more than distant ones
        clip = synth_clip(5, 24, 24, 8, kind="drifting_blobs")
        f = clip.pixels.astype(np.float64)
        near = np.mean(np.abs(f[1] - f[0]))
        far = np.mean(np.abs(f[7] - f[0]))
        assert near < far

    def test_single_frame(self):
        clip = synth_clip(0, 8, 8, 1)
        assert clip.t_total == 1

    def test_bad_dims(self):
        with pytest.raises(ContractError):
            synth_clip(0, 0, 8, 2)
        with pytest.raises(ContractError):
            synth_clip(0, 8, 8, 0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown synthetic kind"):
            synth_clip(0, 8, 8, 2, kind="lava_lamp")


class TestPsnr:
    def test_identical_hits_cap(self):
        clip = synth_clip(2, 8, 8, 2, kind="noise_floor")
        assert psnr(clip, clip) == PSNR_CAP

    def test_uniform_offset_oracle(self):
        # |diff| = 16 everywhere -> mse = 256 -> 10*log10(255^2/256)
        a = VideoClip(np.full((2, 4, 4, 3), 100, dtype=np.uint8))
        b = VideoClip(np.full((2, 4, 4, 3), 116, dtype=np.uint8))
        want = 10.0 * np.log10(255.0**2 / 256.0)
        assert psnr(a, b) == pytest.approx(want, abs=1e-12)

    def test_random_matches_direct_mse(self):
        rng = np.random.default_rng(0)
        a = VideoClip(rng.integers(0, 256, (3, 5, 7, 3), dtype=np.uint8))
        b = VideoClip(rng.integers(0, 256, (3, 5, 7, 3), dtype=np.uint8))
        diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
        want = 10.0 * np.log10(255.0**2 / np.mean(diff**2))
        assert psnr(a, b) == pytest.approx(want, rel=1e-12)

    def test_symmetry(self):
        a = synth_clip(1, 8, 8, 2, kind="noise_floor")
        b = synth_clip(2, 8, 8, 2, kind="noise_floor")
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        a = synth_clip(0, 8, 8, 2)
        b = synth_clip(0, 8, 8, 3)
        with pytest.raises(ShapeError):
            psnr(a, b)


class TestGenerateScale:
    def test_threshold_and_tie(self):
        probs = ProbTensor(
            kind="inter",
            scale_index=2,
            frames=2,
            height=1,
            width=1,
            bit_length=3,
            probs=np.array([0.7, 0.3, 0.5, 0.499, 0.501, 0.5]),
        )
        tm = generate_scale(probs)
        assert tm.spec == ScaleSpec(index=2, width=1, height=1, bit_length=3)
        assert tm.bits.shape == (2, 1, 1, 3)
        np.testing.assert_array_equal(tm.flat_bits(), [1, 0, 1, 0, 1, 1])

    def test_dtype(self):
        probs = ProbTensor("intra", 1, 1, 1, 1, 2, np.array([0.9, 0.1]))
        assert generate_scale(probs).bits.dtype == np.uint8


class TestSelectKappa:
    def test_prefix_sums(self):
        costs = [100, 50, 25]
        assert select_kappa(costs, 1000) == 3
        assert select_kappa(costs, 175) == 3
        assert select_kappa(costs, 174) == 2
        assert select_kappa(costs, 160) == 2
        assert select_kappa(costs, 150) == 2
        assert select_kappa(costs, 149) == 1
        assert select_kappa(costs, 100) == 1
        assert select_kappa(costs, 99) == 0
        assert select_kappa(costs, 0) == 0

    def test_empty(self):
        assert select_kappa([], 10) == 0

    def test_negative_budget(self):
        with pytest.raises(ContractError):
            select_kappa([1], -1)

    def test_negative_cost(self):
        with pytest.raises(ContractError):
            select_kappa([10, -1], 100)


class TestPadding:
    def test_pad_amounts(self):
        clip = VideoClip(np.zeros((2, 6, 10, 3), dtype=np.uint8))
        pixels, pad_r, pad_b = pad_to_blocks(clip, 4)
        assert (pad_r, pad_b) == (2, 2)
        assert pixels.shape == (2, 8, 12, 3)

    def test_edge_replication(self):
        rng = np.random.default_rng(3)
        clip = VideoClip(rng.integers(0, 256, (1, 5, 7, 3), dtype=np.uint8))
        pixels, pad_r, pad_b = pad_to_blocks(clip, 4)
        assert (pad_r, pad_b) == (1, 3)
        # replicated columns repeat the last real column, then rows likewise
        np.testing.assert_array_equal(pixels[:, :5, 7], pixels[:, :5, 6])
        for row in (5, 6, 7):
            np.testing.assert_array_equal(pixels[:, row], pixels[:, 4])

    def test_already_aligned(self):
        clip = VideoClip(np.zeros((1, 8, 8, 3), dtype=np.uint8))
        pixels, pad_r, pad_b = pad_to_blocks(clip, 4)
        assert (pad_r, pad_b) == (0, 0)
        assert pixels is clip.pixels


class TestPyramids:
    def test_default_schedule_and_kinds(self):
        clip = synth_clip(0, 16, 16, 3)
        schedule, intra, inter = pyramids_from_clip(clip, small_cfg())
        assert [(s.width, s.height) for s in schedule] == [(1, 1), (2, 2), (4, 4)]
        assert schedule[len(schedule)].bit_length == 48
        assert intra.kind == "intra" and intra.frames == 1
        assert inter.kind == "inter" and inter.frames == 2

    def test_single_frame_has_no_inter(self):
        clip = synth_clip(0, 8, 8, 1)
        _, intra, inter = pyramids_from_clip(clip, small_cfg())
        assert inter is None
        assert intra.frames == 1


class TestRoundTrip:
    @pytest.mark.parametrize("seed_params", [None, 1, 2])
    def test_decode_matches_encoder_reconstruction(self, seed_params):
        clip = synth_clip(4, 16, 16, 3, kind="drifting_blobs")
        cfg = small_cfg()
        if seed_params is None:
            params = zero_params(SMALL_MODEL)
        else:
            params = init_params(SMALL_MODEL, seed=seed_params)
        blob, est = encode_video(clip, cfg, params)
        out, dst = decode_video(blob, params)
        assert np.array_equal(out.pixels, expected_pixels(clip, cfg))
        assert est.kappa_p == dst.kappa_p == est.n_scales
        assert dst.generated_scales == ()
        assert dst.decoded_bits == sum(
            s.raw_bits for s in est.per_scale if s.transmitted
        )

    def test_encode_deterministic(self):
        clip = synth_clip(9, 12, 8, 2)
        params = init_params(SMALL_MODEL, seed=3)
        a, _ = encode_video(clip, small_cfg(), params)
        b, _ = encode_video(clip, small_cfg(), params)
        assert a == b

    def test_decode_deterministic(self):
        clip = synth_clip(9, 12, 8, 2)
        params = init_params(SMALL_MODEL, seed=3)
        blob, _ = encode_video(clip, small_cfg(), params)
        x, _ = decode_video(blob, params)
        y, _ = decode_video(blob, params)
        assert np.array_equal(x.pixels, y.pixels)

    def test_non_multiple_dimensions(self):
        clip = synth_clip(6, 13, 9, 2, kind="noise_floor")
        params = zero_params(SMALL_MODEL)
        blob, est = encode_video(clip, small_cfg(), params)
        header = read_container(blob).header
        assert (header.width, header.height) == (13, 9)
        assert (header.pad_right, header.pad_bottom) == (3, 3)
        out, _ = decode_video(blob, params)
        assert out.pixels.shape == clip.pixels.shape
        assert np.array_equal(out.pixels, expected_pixels(clip, small_cfg()))

    def test_single_frame_clip(self):
        clip = synth_clip(2, 8, 8, 1, kind="noise_floor")
        params = zero_params(SMALL_MODEL)
        blob, est = encode_video(clip, small_cfg(), params)
        assert est.kappa_p == 0
        assert len(read_container(blob).segments) == est.n_scales
        out, dst = decode_video(blob, params)
        assert np.array_equal(out.pixels, expected_pixels(clip, small_cfg()))
        assert dst.generated_scales == ()

    def test_single_frame_ignores_requested_kappa(self):
        clip = synth_clip(2, 8, 8, 1)
        params = zero_params(SMALL_MODEL)
        _, est = encode_video(clip, small_cfg(kappa_p=2), params)
        assert est.kappa_p == 0

    def test_zero_model_coding_overhead_is_small(self):
        # with all-zero weights every probability is exactly 1/2, so the
        # coded size can exceed the raw size only by the coder's flush
        clip = synth_clip(8, 16, 16, 3, kind="noise_floor")
        _, est = encode_video(clip, small_cfg(), zero_params(SMALL_MODEL))
        for s in est.per_scale:
            assert s.raw_bits <= s.coded_bits <= s.raw_bits + 48

    def test_stats_accounting(self):
        clip = synth_clip(12, 16, 16, 4)
        params = init_params(SMALL_MODEL, seed=5)
        blob, est = encode_video(clip, small_cfg(), params)
        box = read_container(blob)
        assert est.container_bytes == len(blob)
        assert est.payload_bits == sum(8 * len(seg.payload) for seg in box.segments)
        assert est.bits_per_pixel == pytest.approx(
            8.0 * len(blob) / (16 * 16 * 4)
        )
        for s in est.per_scale:
            spec = box.header.schedule[s.scale_index]
            frames = 1 if s.kind == "intra" else 3
            assert s.raw_bits == spec.raw_bits(frames)
            assert s.tokens == frames * spec.height * spec.width
        assert [s.transmitted for s in est.per_scale] == [True] * 6

    def test_stats_serialization(self):
        clip = synth_clip(0, 8, 8, 2)
        params = zero_params(SMALL_MODEL)
        blob, est = encode_video(clip, small_cfg(), params)
        _, dst = decode_video(blob, params)
        parsed = json.loads(est.to_json())
        assert parsed["n_scales"] == est.n_scales
        assert len(parsed["per_scale"]) == len(est.per_scale)
        assert "kind,scale" in est.to_csv().splitlines()[0]
        parsed = json.loads(dst.to_json())
        assert parsed["kappa_p"] == dst.kappa_p
        assert str(dst.decoded_bits) in dst.to_csv()


class TestTruncation:
    def test_truncate_equals_direct_encode(self):
        # coding is prefix-stable: cutting inter scales off a full bitstream
        # must give the same bytes as asking the encoder for that kappa
        clip = synth_clip(14, 16, 16, 3, kind="drifting_blobs")
        params = init_params(SMALL_MODEL, seed=7)
        full, est = encode_video(clip, small_cfg(), params)
        for kappa in range(est.n_scales + 1):
            direct, _ = encode_video(clip, small_cfg(kappa_p=kappa), params)
            assert truncate(full, kappa) == direct

    def test_truncated_decode_generates_missing_scales(self):
        clip = synth_clip(14, 16, 16, 3, kind="drifting_blobs")
        params = init_params(SMALL_MODEL, seed=7)
        full, est = encode_video(clip, small_cfg(), params)
        k_total = est.n_scales
        for kappa in range(k_total + 1):
            out, dst = decode_video(truncate(full, kappa), params)
            assert dst.kappa_p == kappa
            assert dst.generated_scales == tuple(range(kappa + 1, k_total + 1))
            assert out.pixels.shape == clip.pixels.shape
            # intra frame is fully transmitted, so frame 0 never changes
            assert np.array_equal(
                out.pixels[0], expected_pixels(clip, small_cfg())[0]
            )

    def test_truncated_and_direct_decode_identically(self):
        clip = synth_clip(15, 16, 16, 2)
        params = init_params(SMALL_MODEL, seed=8)
        full, est = encode_video(clip, small_cfg(), params)
        for kappa in range(est.n_scales + 1):
            a, _ = decode_video(truncate(full, kappa), params)
            direct, _ = encode_video(clip, small_cfg(kappa_p=kappa), params)
            b, _ = decode_video(direct, params)
            assert np.array_equal(a.pixels, b.pixels)


class TestBudget:
    def test_budget_selects_prefix(self):
        clip = synth_clip(21, 16, 16, 3)
        params = init_params(SMALL_MODEL, seed=9)
        _, full = encode_video(clip, small_cfg(), params)
        inter_costs = [s.coded_bits for s in full.per_scale if s.kind == "inter"]
        for budget in (0, inter_costs[0] - 1, inter_costs[0],
                       sum(inter_costs[:2]), sum(inter_costs), 10**9):
            _, est = encode_video(clip, small_cfg(budget_bits=budget), params)
            assert est.kappa_p == select_kappa(inter_costs, budget)
        _, est = encode_video(clip, small_cfg(budget_bits=10**9), params)
        assert est.kappa_p == est.n_scales
        _, est = encode_video(clip, small_cfg(budget_bits=0), params)
        assert est.kappa_p == 0

    def test_budget_counts_only_inter_payloads(self):
        clip = synth_clip(21, 16, 16, 3)
        params = zero_params(SMALL_MODEL)
        _, full = encode_video(clip, small_cfg(), params)
        first_inter = next(
            s.coded_bits for s in full.per_scale if s.kind == "inter"
        )
        _, est = encode_video(
            clip, small_cfg(budget_bits=first_inter), params
        )
        assert est.kappa_p == 1


class TestValidation:
    def test_kappa_and_budget_conflict(self):
        with pytest.raises(ConfigError, match="not both"):
            small_cfg(kappa_p=1, budget_bits=100)

    def test_negative_kappa(self):
        with pytest.raises(ConfigError):
            small_cfg(kappa_p=-1)

    def test_kappa_above_k(self):
        clip = synth_clip(0, 16, 16, 2)
        with pytest.raises(ConfigError, match="exceeds"):
            encode_video(clip, small_cfg(kappa_p=9), zero_params(SMALL_MODEL))

    def test_architecture_mismatch(self):
        clip = synth_clip(0, 16, 16, 2)
        other = ModelConfig(d=16, n_blocks=1, n_heads=2, max_scales=4, bit_length=48)
        with pytest.raises(ModelError, match="architecture"):
            encode_video(clip, small_cfg(), zero_params(other))

    def test_seed_does_not_count_as_architecture(self):
        clip = synth_clip(0, 8, 8, 1)
        reseeded = dataclasses.replace(SMALL_MODEL, seed=99)
        params = init_params(reseeded, seed=99)
        blob, _ = encode_video(clip, small_cfg(), params)
        out, _ = decode_video(blob, params)
        assert out.pixels.shape == clip.pixels.shape

    def test_wrong_weights_at_decode(self):
        clip = synth_clip(0, 16, 16, 2)
        enc_params = init_params(SMALL_MODEL, seed=1)
        blob, _ = encode_video(clip, small_cfg(), enc_params)
        with pytest.raises(ModelError, match="coded with model"):
            decode_video(blob, init_params(SMALL_MODEL, seed=2))

    def test_schedule_grid_mismatch(self):
        clip = synth_clip(0, 16, 16, 2)
        bad = ScaleSchedule(
            (ScaleSpec(1, 1, 1, 48), ScaleSpec(2, 8, 8, 48))
        )
        with pytest.raises(ConfigError, match="tops out"):
            encode_video(clip, small_cfg(schedule=bad), zero_params(SMALL_MODEL))

    def test_schedule_bit_length_mismatch(self):
        clip = synth_clip(0, 16, 16, 2)
        bad = ScaleSchedule(
            (ScaleSpec(1, 1, 1, 12), ScaleSpec(2, 4, 4, 12))
        )
        model = dataclasses.replace(SMALL_MODEL, bit_length=12)
        with pytest.raises(ConfigError, match="frontend produces"):
            encode_video(
                clip, CodecConfig(model=model, schedule=bad), zero_params(model)
            )

    def test_scales_beyond_model_capacity(self):
        # 64x64 at s=4 needs K=5 > max_scales=4; the context model refuses
        clip = synth_clip(0, 64, 64, 2)
        with pytest.raises(ModelError):
            encode_video(clip, small_cfg(), zero_params(SMALL_MODEL))
