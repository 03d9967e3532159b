# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Tests for run configuration loading."""

import json
import tempfile
from pathlib import Path

import pytest

from config import ConfigError, RunConfig, config_from_dict, example_config, load_config


class TestConfigFromDict:
    """Tests for config_from_dict."""

    def test_empty_document_uses_defaults(self):
        """Missing sections fall back to defaults."""
        cfg = config_from_dict({})
        assert cfg.data.dims == 2
        assert cfg.data.shape == [32, 32]
        assert cfg.data.n_per_group == 512
        assert cfg.train.delta == 5.0

    def test_3d_shape_default(self):
        """dims=3 picks the volumetric default grid."""
        cfg = config_from_dict({'data': {'dims': 3}})
        assert cfg.data.shape == [32, 32, 32]

    def test_unknown_top_level_key(self):
        """Unknown sections are rejected."""
        with pytest.raises(ConfigError, match='Unknown top-level'):
            config_from_dict({'model': {}})

    def test_unknown_section_key(self):
        """Typos inside a section are rejected with the section name."""
        with pytest.raises(ConfigError, match="'train'"):
            config_from_dict({'train': {'detla': 3}})

    def test_invalid_value_wrapped(self):
        """Validation errors surface as ConfigError."""
        with pytest.raises(ConfigError):
            config_from_dict({'train': {'delta': -1}})
        with pytest.raises(ConfigError):
            config_from_dict({'data': {'dims': 2, 'shape': [32, 32, 32]}})


class TestLoadConfig:
    """Tests for load_config and RunConfig persistence."""

    def test_save_and_load(self):
        """A saved config loads back unchanged."""
        cfg = example_config(3)
        with tempfile.TemporaryDirectory() as tmp:
            path = cfg.save(Path(tmp) / 'config.json')
            loaded = load_config(path)
        assert loaded.to_dict() == cfg.to_dict()
        assert loaded.train.mode == 'warp-field'

    def test_seed_override(self):
        """--seed replaces both section seeds."""
        cfg = load_config(seed=42)
        assert cfg.data.seed == 42
        assert cfg.train.seed == 42

    def test_missing_file(self):
        """A missing config file is a ConfigError."""
        with pytest.raises(ConfigError, match='not found'):
            load_config('/nonexistent/config.json')

    def test_invalid_json(self):
        """Malformed JSON is a ConfigError."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'config.json'
            path.write_text('{"data": ')
            with pytest.raises(ConfigError, match='not valid JSON'):
                load_config(path)

    def test_partial_document(self):
        """Only the given keys override defaults."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'config.json'
            path.write_text(json.dumps({'data': {'n_per_group': 8}, 'train': {'epochs': 2}}))
            cfg = load_config(path)
        assert cfg.data.n_per_group == 8
        assert cfg.train.epochs == 2
        assert cfg.train.lambda_phi == RunConfig().train.lambda_phi
