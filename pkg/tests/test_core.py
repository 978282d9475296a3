import dataclasses

import numpy as np
import pytest

from maskprop.core import (
    ConfigError,
    EmptyMaskError,
    TrainConfig,
    VideoSequence,
    first_reference,
    make_reference,
    validate_sequence,
)

from conftest import make_seq

PUBLISHED_DEFAULTS = {
    "lambda_ce": 100.0,
    "lambda_s": 1.0,
    "lambda_t": 1.0,
    "lambda_gp": 10.0,
    "k_window": 4,
    "critic_steps_per_gen": 5,
    "lr": 1e-5,
    "adam_beta1": 0.5,
    "adam_beta2": 0.999,
    "batch_size": 6,
    "poly_decay_power": 0.9,
    "lr_constant_epochs": 10,
    "overwrite_threshold": 0.25,
    "pretrain_epochs": 6,
    "adversarial_epochs": 40,
}


def test_well_formed_sequence_has_no_violations():
    assert validate_sequence(make_seq(3)) == []


def test_short_track_reported():
    assert validate_sequence(make_seq(3, track_len=2)) == ["track 1 length 2 ≠ T=3"]


def test_non_binary_mask_reported():
    problems = validate_sequence(make_seq(3, mask_value=0.5))
    assert len(problems) == 1 and "non-binary gt mask" in problems[0]


def test_mismatched_frame_size_reported():
    seq = make_seq(2)
    seq.frames[1] = np.zeros((4, 4, 3), dtype=np.float32)
    assert any("size" in p for p in validate_sequence(seq))


def test_validate_is_pure():
    seq = make_seq(3, track_len=2)
    assert validate_sequence(seq) == validate_sequence(seq)


def test_make_reference_extracts_pair():
    seq = make_seq(3)
    ref = make_reference(seq, "1", 0)
    assert ref.frame_index == 0 and ref.object_id == "1"
    np.testing.assert_array_equal(ref.mask, seq.gt_tracks["1"][0])
    assert ref.frame is seq.frames[0]


def test_make_reference_empty_mask():
    seq = make_seq(6)
    seq.gt_tracks["1"][5] = np.zeros((8, 8), dtype=np.float32)
    with pytest.raises(EmptyMaskError):
        make_reference(seq, "1", 5)


def test_make_reference_out_of_range():
    seq = make_seq(3)
    with pytest.raises(IndexError):
        make_reference(seq, "1", 3)


def test_first_reference_skips_absent_frames():
    seq = make_seq(4)
    seq.gt_tracks["1"][0] = np.zeros((8, 8), dtype=np.float32)
    assert first_reference(seq, "1").frame_index == 1


def test_config_defaults_match_published_settings():
    cfg = TrainConfig()
    for name, value in PUBLISHED_DEFAULTS.items():
        assert getattr(cfg, name) == value, name


def test_config_text_round_trip(tmp_path):
    cfg = TrainConfig(lr=3e-4, encoder_channels=(8, 16), augment=False, reference_policy="first")
    path = tmp_path / "cfg.txt"
    cfg.save(path)
    assert TrainConfig.load(path) == cfg


def test_config_comments_and_blank_lines():
    cfg = TrainConfig.from_text("# experiment\n\nlr = 0.001  # faster\nk_window=2\n")
    assert cfg.lr == 1e-3 and cfg.k_window == 2


def test_config_unknown_key_named():
    with pytest.raises(ConfigError, match="lamda_ce"):
        TrainConfig.from_text("lamda_ce = 3\n")


@pytest.mark.parametrize("field,value", [("lambda_s", -1.0), ("k_window", 0), ("overwrite_threshold", 1.0)])
def test_config_invariants(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value})


def test_core_types_are_frozen():
    seq = make_seq(2)
    with pytest.raises(dataclasses.FrozenInstanceError):
        seq.name = "other"


def test_adversarial_lr_round_trip():
    cfg = TrainConfig(adversarial_lr=2e-4)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    assert cfg.adversarial_base_lr == 2e-4
    assert TrainConfig().adversarial_base_lr == TrainConfig().lr
    with pytest.raises(ConfigError):
        TrainConfig(adversarial_lr=0.0)
