"""Config schema: parsing, normalization, overrides, round-trips."""

import copy
import json

import pytest

from protofed.config import (
    SchemaError,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
)

GOOD = {
    "algorithm": "mp_fedcl",
    "N": 4,
    "T": 10,
    "K": 3,
    "loss": {"tau": 0.07},
    "arch": {"input_dim": 784, "num_classes": 10},
    "dataset": {"kind": "synth_digits", "n": 2000},
    "partition": {"kind": "dirichlet", "alpha": 0.05},
    "seeds": {"master": 42},
}


def doc(**over):
    out = copy.deepcopy(GOOD)
    out.update(over)
    return out


class TestParsing:
    def test_good_document(self):
        cfg = config_from_dict(doc())
        assert cfg.algorithm == "mp_fedcl"
        assert cfg.K == 3
        assert cfg.loss.use_contrastive
        assert cfg.arch.encoder == [512, 512] and cfg.arch.head == [256]

    def test_round_trip(self):
        cfg = config_from_dict(doc())
        again = config_from_dict(config_to_dict(cfg))
        assert config_to_dict(again) == config_to_dict(cfg)

    def test_missing_tau_for_contrastive_algorithm(self):
        bad = doc()
        del bad["loss"]
        with pytest.raises(SchemaError, match="loss.tau"):
            config_from_dict(bad)

    def test_tau_not_required_for_fedavg(self):
        bad = doc(algorithm="fedavg")
        del bad["loss"]
        cfg = config_from_dict(bad)
        assert not cfg.loss.use_contrastive

    def test_unknown_top_level_key(self):
        with pytest.raises(SchemaError, match="unknown key"):
            config_from_dict(doc(batchsize=3))

    def test_unknown_nested_key(self):
        with pytest.raises(SchemaError, match="loss"):
            config_from_dict(doc(loss={"tau": 0.07, "temp": 1}))

    def test_unknown_algorithm(self):
        with pytest.raises(SchemaError, match="algorithm"):
            config_from_dict(doc(algorithm="fedsgd"))

    def test_sp_fedcl_forces_k1(self):
        cfg = config_from_dict(doc(algorithm="sp_fedcl", K=4))
        assert cfg.K == 1

    def test_fedproto_forces_k1_and_default_lambda(self):
        bad = doc(algorithm="fedproto", K=4)
        del bad["loss"]
        cfg = config_from_dict(bad)
        assert cfg.K == 1
        assert cfg.loss.lambda_proto == 1.0

    def test_fedprox_gets_default_mu(self):
        bad = doc(algorithm="fedprox")
        del bad["loss"]
        cfg = config_from_dict(bad)
        assert cfg.loss.mu_prox == 0.01

    def test_explicit_mu_respected(self):
        cfg = config_from_dict(doc(algorithm="fedprox", loss={"mu_prox": 0.0}))
        assert cfg.loss.mu_prox == 0.0

    def test_dirichlet_needs_alpha(self):
        with pytest.raises(SchemaError, match="partition.alpha"):
            config_from_dict(doc(partition={"kind": "dirichlet"}))

    def test_feature_skew_needs_one_transform_per_client(self):
        with pytest.raises(SchemaError, match="transforms"):
            config_from_dict(
                doc(partition={"kind": "feature_skew", "transforms": [{"scale": 1.0}]})
            )

    def test_feature_skew_parses_transforms(self):
        transforms = [{"rotation_angle": 0.5 * i, "noise_sigma": 0.1} for i in range(4)]
        cfg = config_from_dict(doc(partition={"kind": "feature_skew", "transforms": transforms}))
        assert len(cfg.partition.transforms) == 4
        assert cfg.partition.transforms[2].rotation_angle == 1.0

    def test_bad_precision(self):
        with pytest.raises(SchemaError, match="precision"):
            config_from_dict(doc(precision="f16"))

    def test_bad_momentum(self):
        with pytest.raises(SchemaError, match="momentum"):
            config_from_dict(doc(momentum=1.0))

    def test_gaussian_dataset_requires_shape_keys(self):
        with pytest.raises(SchemaError, match="dataset."):
            config_from_dict(doc(dataset={"kind": "synth_gaussian", "classes": 3}))


class TestOverrides:
    def test_dot_path_values(self):
        raw = apply_overrides(doc(), ["loss.tau=0.2", "partition.alpha=0.5", "T=3"])
        cfg = config_from_dict(raw)
        assert cfg.loss.tau == 0.2
        assert cfg.partition.alpha == 0.5
        assert cfg.T == 3

    def test_string_values_pass_through(self):
        raw = apply_overrides(doc(), ["algorithm=fedavg"])
        assert raw["algorithm"] == "fedavg"

    def test_malformed_override(self):
        with pytest.raises(SchemaError, match="key=value"):
            apply_overrides(doc(), ["loss.tau"])


class TestLoadConfig:
    def test_from_file_with_overrides(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(doc()))
        cfg = load_config(path, ["T=2"])
        assert cfg.T == 2

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{not json")
        with pytest.raises(SchemaError, match="JSON"):
            load_config(path)
