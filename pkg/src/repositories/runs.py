"""Run-config files and run manifests.

A run-config file is a flat dotenv-style text file whose keys are the
`TrainConfig` field names, e.g.

    architecture = conv3-16,maxpool,conv3-32,maxpool,fc-10
    learning_rates = 0.03x3
    beta = 0.25
"""

from pathlib import Path
from typing import Any

from dotenv import dotenv_values
from pydantic import ValidationError

from src.helpers.constants import MANIFEST_JSON
from src.helpers.logger import Logger
from src.helpers.model import ConfigurationError
from src.helpers.repository import BaseRepository
from src.models.runs import RunManifest
from src.models.training import TrainConfig

logger = Logger(__name__)


class RunRepository(BaseRepository):
    def read_config_values(self, path: str | Path) -> dict[str, str]:
        source = self.resolve(path)
        if not source.is_file():
            raise ConfigurationError(f"config file {source} not found")
        values = dotenv_values(source)
        unknown = sorted(set(values) - set(TrainConfig.model_fields))
        if unknown:
            raise ConfigurationError(f"{source}: unknown config keys {unknown}")
        return {key: value for key, value in values.items() if value is not None}

    def load_config(self, path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
        """Defaults, then file keys, then `overrides` (command-line flags)."""
        values: dict[str, Any] = self.read_config_values(path) if path else {}
        values.update({key: value for key, value in (overrides or {}).items() if value is not None})
        try:
            return TrainConfig.model_validate(values)
        except ValidationError as e:
            problems = "; ".join(f"{'.'.join(map(str, err['loc'])) or 'config'}: {err['msg']}" for err in e.errors())
            raise ConfigurationError(f"invalid configuration: {problems}") from e

    def write_manifest(self, out_dir: str | Path, manifest: RunManifest) -> Path:
        target = Path(out_dir) / MANIFEST_JSON
        return self.write_text(target, manifest.model_dump_json(indent=2))

    def read_manifest(self, out_dir: str | Path) -> RunManifest:
        source = self.resolve(Path(out_dir) / MANIFEST_JSON)
        return RunManifest.model_validate_json(source.read_text())
