from __future__ import annotations

import os
from typing import TYPE_CHECKING

import anyio
import pytest

import modelzoo.config
from modelzoo.config import ConfigError, parse_config

if TYPE_CHECKING:
    from pathlib import Path

    from pytest_mock import MockerFixture

MINIMAL = "[run]\nseed = 1\n"


class TestParseConfig:
    """Test `def parse_config`."""

    def test_minimal(self) -> None:
        """Assert that a seed alone gives a config with every default."""
        config = parse_config(MINIMAL, threads=2)
        assert config.seed == 1
        assert config.threads == 2
        assert config.model.grids == [1, 4, 16]
        assert config.sampler.steps == 30
        assert config.training.optimizer == "sgd"

    def test_values_are_coerced(self) -> None:
        """Assert that values take the type of their field."""
        text = """
        # comments and blank lines are skipped
        [run]
        seed = 9

        [model]
        family = descriptive
        variant = multigrid
        grids = 1, 4
        rigorous = TRUE
        lam = 1e-2  # trailing comment

        [architecture]
        hidden = 16,8
        """
        config = parse_config(text, threads=1)
        assert config.model.grids == [1, 4]
        assert config.model.rigorous is True
        assert config.model.lam == 0.01
        assert config.architecture.hidden == [16, 8]

    def test_quoted_values(self) -> None:
        """Assert that values are unquoted with shell rules."""
        text = MINIMAL + "output_dir = 'my runs'\n"
        assert parse_config(text, threads=1).run.output_dir == "my runs"

    def test_keys_are_case_insensitive(self) -> None:
        """Assert that section and key names are lower-cased."""
        config = parse_config("[RUN]\nSeed = 4\n", threads=1)
        assert config.seed == 4

    def test_seed_required(self) -> None:
        """Assert that a config without a seed is rejected."""
        with pytest.raises(ConfigError, match="run.seed") as info:
            parse_config("[model]\nfamily = rbm\n", threads=1)
        assert info.value.section == "run"
        assert info.value.key == "seed"

    @pytest.mark.parametrize(
        ("text", "section", "key"),
        (
            (MINIMAL + "[runs]\n", "runs", None),
            ("seed = 1\n", None, None),
            (MINIMAL + "just words\n", "run", None),
            (MINIMAL + "seed = 2\n", "run", "seed"),
            (MINIMAL + "color = blue\n", "run", "color"),
            (MINIMAL + "[model]\nrigorous = yes\n", "model", "rigorous"),
            (MINIMAL + "[training]\nepochs = many\n", "training", "epochs"),
        ),
    )
    def test_rejects(self, text: str, section: str | None, key: str | None) -> None:
        """Assert that unknown names, malformed lines and bad values name their location."""
        with pytest.raises(ConfigError) as info:
            parse_config(text, threads=1)
        assert info.value.section == section
        assert info.value.key == key

    @pytest.mark.parametrize(
        ("text", "section"),
        (
            (MINIMAL + "[sampler]\nstep_size = 0\n", "sampler"),
            (MINIMAL + "[training]\nlearning_rate = -1\n", "training"),
            (MINIMAL + "[training]\noptimizer = lbfgs\n", "training"),
        ),
    )
    def test_rejects_invalid_settings(self, text: str, section: str) -> None:
        """Assert that sampler and training settings are validated on load."""
        with pytest.raises(ConfigError) as info:
            parse_config(text, threads=1)
        assert info.value.section == section

    def test_format_reads_back(self) -> None:
        """Assert that a rendered config parses to the same sections."""
        text = MINIMAL + "output_dir = 'a b'\n[model]\ngrids = 1,2\nrigorous = true\n"
        config = parse_config(text, threads=3)
        again = parse_config(modelzoo.config.format_config(config), threads=3)
        assert list(again.sections()) == list(config.sections())

    def test_derived_settings(self) -> None:
        """Assert that sampler and training sections build their runtime settings."""
        text = MINIMAL + "[sampler]\ninference_steps = 4\n[training]\ndecay = log\n"
        config = parse_config(text, threads=1)
        assert config.langevin().rng_seed == 1
        assert config.inference_langevin().steps == 4
        assert config.train().decay == "log"
        assert config.train().log_every == config.run.log_every


class TestThreads:
    """Test how the worker thread count is configured."""

    def test_from_environment(self, mocker: MockerFixture) -> None:
        """Assert that `MODELZOO_THREADS` is used when no argument is given."""
        mocker.patch.dict(os.environ, {"MODELZOO_THREADS": "3"}, clear=True)
        assert parse_config(MINIMAL).threads == 3

    def test_argument_wins(self, mocker: MockerFixture) -> None:
        """Assert that an explicit thread count overrides the environment."""
        mocker.patch.dict(os.environ, {"MODELZOO_THREADS": "3"}, clear=True)
        assert parse_config(MINIMAL, threads=5).threads == 5

    def test_cpu_count_default(self, mocker: MockerFixture) -> None:
        """Assert that the CPU count is the default."""
        mocker.patch.dict(os.environ, {}, clear=True)
        mocker.patch.object(modelzoo.config.os, "cpu_count", return_value=6)
        assert parse_config(MINIMAL).threads == 6

    @pytest.mark.parametrize("setting", ("zero", "0", "-2"))
    def test_rejects(self, mocker: MockerFixture, setting: str) -> None:
        """Assert that thread counts must be positive integers."""
        mocker.patch.dict(os.environ, {"MODELZOO_THREADS": setting}, clear=True)
        with pytest.raises(ConfigError) as info:
            parse_config(MINIMAL)
        assert info.value.section == "environment"
        assert info.value.key == "MODELZOO_THREADS"


class TestLoadConfig:
    """Test `def load_config`."""

    @pytest.mark.anyio
    async def test_load(self, config_file: anyio.Path) -> None:
        """Assert that a config file is loaded and parsed."""
        config = await modelzoo.config.load_config(config_file, threads=1)
        assert config is not None
        assert config.dataset.name == "gaussian-mixture-2d"
        assert config.model.variant == "logistic"

    @pytest.mark.anyio
    async def test_missing_file(self, mocker: MockerFixture, tmp_path: Path) -> None:
        """Assert that missing files are logged, and raised unless suppressed."""
        logger = mocker.patch.object(modelzoo.config, "logger", autospec=True)
        source = anyio.Path(tmp_path) / "missing.cfg"
        with pytest.raises(FileNotFoundError):
            await modelzoo.config.load_config(source)
        assert await modelzoo.config.load_config(source, raise_exceptions=False) is None
        assert logger.error.call_count == 2
