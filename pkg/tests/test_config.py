"""Config file parsing, canonical serialization, and cache-key hashing."""

import pytest

from pointseg import config
from pointseg.errors import ValidationError


class TestDefaults:
    def test_defaults_construct(self):
        cfg = config.default_config()
        assert cfg.n_train == 20 and cfg.train1.max_epochs == 40
        assert cfg.train1.momentum == 0.9 and cfg.train1.lr0 == 0.01
        assert cfg.distill.refresh_period == 8

    def test_round_trip(self):
        cfg = config.default_config()
        assert config.parse_config(config.serialize_config(cfg)) == cfg

    def test_round_trip_after_overrides(self):
        cfg = config.parse_config(
            "synth.dims = 16,16,16\ncrf.window_radius = none\nrun.lams = 0,0.5,1\n")
        assert config.parse_config(config.serialize_config(cfg)) == cfg


class TestParsing:
    def test_overrides_apply(self):
        cfg = config.parse_config(
            "train1.max_epochs = 10\nrun.arms = baseline,both\nloss.beta = 0.2\n")
        assert cfg.train1.max_epochs == 10
        assert cfg.arms == ("baseline", "both")
        assert cfg.loss.beta == 0.2

    def test_comments_and_blank_lines(self):
        cfg = config.parse_config(
            "# a comment\n\nsynth.contrast = 2.0  # trailing comment\n")
        assert cfg.synth.contrast == 2.0

    def test_bool_and_none(self):
        cfg = config.parse_config(
            "train1.flip_xyz = false\ncrf.window_radius = none\n")
        assert cfg.train1.flip_xyz is False
        assert cfg.crf.window_radius is None

    def test_unknown_section_rejected(self):
        with pytest.raises(ValidationError, match="unknown section"):
            config.parse_config("paint.color = red\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown key"):
            config.parse_config("synth.contrastt = 3.0\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValidationError, match="duplicate"):
            config.parse_config("loss.alpha = 1\nloss.alpha = 2\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ValidationError, match="section.key"):
            config.parse_config("just some words\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ValidationError, match="cannot parse"):
            config.parse_config("train1.max_epochs = ten\n")

    def test_wrong_tuple_arity_rejected(self):
        with pytest.raises(ValidationError, match="cannot parse"):
            config.parse_config("synth.dims = 16,16\n")


class TestSemanticChecks:
    def test_unknown_arm(self):
        with pytest.raises(ValidationError, match="unknown arm"):
            config.parse_config("run.arms = both,tables\n")

    def test_repeated_arm(self):
        with pytest.raises(ValidationError, match="repeats"):
            config.parse_config("run.arms = both,both\n")

    def test_lam_out_of_range(self):
        with pytest.raises(ValidationError, match="lams"):
            config.parse_config("run.lams = 1.5\n")

    def test_stage2_requires_both_arm(self):
        with pytest.raises(ValidationError, match="both"):
            config.parse_config("run.arms = baseline\nrun.stage2 = true\n")

    def test_negative_seed(self):
        with pytest.raises(ValidationError, match="seed"):
            config.parse_config("run.seed = -1\n")

    def test_sub_config_validation_propagates(self):
        with pytest.raises(ValidationError, match="epsilon"):
            config.parse_config("expand.epsilon = 2.0\n")


class TestHashing:
    def test_stable(self):
        cfg = config.default_config()
        h = config.config_hash(cfg, ("synth", "split"), extra=("data", 0))
        assert h == config.config_hash(cfg, ("synth", "split"), extra=("data", 0))
        assert len(h) == 64

    def test_section_scoping(self):
        base = config.default_config()
        tweaked = config.parse_config("train1.lr0 = 0.02\n")
        assert (config.config_hash(base, ("synth",))
                == config.config_hash(tweaked, ("synth",)))
        assert (config.config_hash(base, ("train1",))
                != config.config_hash(tweaked, ("train1",)))

    def test_extra_tokens_distinguish(self):
        cfg = config.default_config()
        assert (config.config_hash(cfg, (), extra=("stage1", "net_a"))
                != config.config_hash(cfg, (), extra=("stage1", "net_b")))

    def test_unknown_section_rejected(self):
        with pytest.raises(ValidationError, match="unknown config section"):
            config.config_hash(config.default_config(), ("nope",))


class TestLoadConfig:
    def test_reads_file(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text("split.n_test = 4\n")
        assert config.load_config(str(p)).n_test == 4

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError, match="cannot read"):
            config.load_config(str(tmp_path / "nope.cfg"))
