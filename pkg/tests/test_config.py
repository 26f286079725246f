"""Config plumbing: defaults, files, overrides, strictness, digests."""

import json

import pytest

from falconseg import config
from falconseg.config import (
    DiscriminatorConfig,
    EvalConfig,
    NetworkConfig,
    RunConfig,
    TrainConfig,
)
from falconseg.errors import ConfigError


class TestDefaults:
    def test_paper_hyperparameters(self):
        cfg = RunConfig()
        assert cfg.train.lr == 0.001
        assert cfg.loss.a == 0.2
        assert cfg.loss.lambda1 == 0.9
        assert cfg.loss.lambda2 == 0.1
        assert cfg.eval.prob_threshold == 0.5
        assert cfg.disc.leaky_slope == 0.2
        assert cfg.disc.dropout_rate == 0.25

    def test_network_invariants(self):
        with pytest.raises(ConfigError):
            NetworkConfig(depth=1, channels_per_level=(8,))
        with pytest.raises(ConfigError):
            NetworkConfig(depth=3, channels_per_level=(8, 16))
        with pytest.raises(ConfigError):
            NetworkConfig(input_size=(30, 32))  # not divisible by 4
        with pytest.raises(ConfigError):
            NetworkConfig(encoder_kind="resnet")
        with pytest.raises(ConfigError):
            NetworkConfig(proto_agg="median")

    def test_train_invariants(self):
        with pytest.raises(ConfigError):
            TrainConfig(ft_loss="l2")
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(early_stop_patience=-1)

    def test_eval_invariants(self):
        with pytest.raises(ConfigError):
            EvalConfig(hd95_mode="median")
        with pytest.raises(ConfigError):
            EvalConfig(prob_threshold=0.0)

    def test_disc_invariants(self):
        with pytest.raises(ConfigError):
            DiscriminatorConfig(channels=())
        with pytest.raises(ConfigError):
            DiscriminatorConfig(dropout_rate=1.0)


class TestRoundTrip:
    def test_dict_round_trip(self):
        cfg = RunConfig(seed=7)
        assert config.from_dict(config.as_dict(cfg)) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = config.apply_overrides(RunConfig(), ["train.lr=0.01", "seed=3"])
        path = tmp_path / "cfg.json"
        config.write_resolved(cfg, path)
        assert config.load(path) == cfg

    def test_partial_file_fills_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"train": {"episodes": 5}}))
        cfg = config.load(path)
        assert cfg.train.episodes == 5
        assert cfg.train.lr == 0.001  # untouched default


class TestStrictness:
    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            config.from_dict({"optimizer": {"lr": 1}})

    def test_unknown_key_in_section(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            config.from_dict({"train": {"learning_rate": 0.1}})

    def test_non_mapping_section(self):
        with pytest.raises(ConfigError):
            config.from_dict({"train": 5})

    def test_invalid_json_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            config.load(path)

    def test_non_object_json_file(self, tmp_path):
        path = tmp_path / "arr.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            config.load(path)

    def test_bad_seed(self):
        with pytest.raises(ConfigError):
            config.from_dict({"seed": "abc"})


class TestOverrides:
    def test_simple_override(self):
        cfg = config.apply_overrides(RunConfig(), ["train.lr=0.05"])
        assert cfg.train.lr == 0.05

    def test_seed_override(self):
        cfg = config.apply_overrides(RunConfig(), ["seed=42"])
        assert cfg.seed == 42

    def test_json_list_value(self):
        cfg = config.apply_overrides(
            RunConfig(),
            ["network.channels_per_level=[4, 8, 16]", "network.bottleneck_channels=16"],
        )
        assert cfg.network.channels_per_level == (4, 8, 16)

    def test_string_value_passthrough(self):
        cfg = config.apply_overrides(RunConfig(), ["train.ft_loss=dice"])
        assert cfg.train.ft_loss == "dice"

    def test_bool_value(self):
        cfg = config.apply_overrides(RunConfig(), ["train.disc_enabled=false"])
        assert cfg.train.disc_enabled is False

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config.apply_overrides(RunConfig(), ["train.bogus=1"])
        with pytest.raises(ConfigError):
            config.apply_overrides(RunConfig(), ["rocket.lr=1"])

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            config.apply_overrides(RunConfig(), ["train.lr"])
        with pytest.raises(ConfigError):
            config.apply_overrides(RunConfig(), ["lr=0.1"])

    def test_precedence_file_then_cli(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"train": {"lr": 0.01, "episodes": 9}}))
        cfg = config.resolve(path, ["train.lr=0.5"])
        assert cfg.train.lr == 0.5  # CLI wins
        assert cfg.train.episodes == 9  # file survives where not overridden

    def test_invariants_enforced_after_override(self):
        with pytest.raises(ConfigError):
            config.apply_overrides(RunConfig(), ["network.depth=1"])


class TestDigest:
    def test_stable(self):
        assert config.digest(RunConfig()) == config.digest(RunConfig())

    def test_sensitive_to_values(self):
        a = config.digest(RunConfig())
        b = config.digest(config.apply_overrides(RunConfig(), ["train.lr=0.002"]))
        assert a != b

    def test_short_hex(self):
        d = config.digest(RunConfig())
        assert len(d) == 12
        int(d, 16)
