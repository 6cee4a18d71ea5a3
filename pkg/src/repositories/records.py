import csv
import io
from enum import Enum
from pathlib import Path

from pydantic import BaseModel, ValidationError

from src.helpers.model import ConfigurationError, CorruptionError
from src.helpers.repository import BaseRepository


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RecordRepository(BaseRepository):
    """CSV files with one record per row and the record's field order as header."""

    @staticmethod
    def columns(schema: type[BaseModel]) -> list[str]:
        return list(schema.model_fields)

    def render(self, records: list[BaseModel], schema: type[BaseModel]) -> str:
        columns = self.columns(schema)
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow({name: _cell(getattr(record, name)) for name in columns})
        return buffer.getvalue()

    def write(self, path: str | Path, records: list[BaseModel], schema: type[BaseModel]) -> Path:
        if not records:
            raise ConfigurationError(f"refusing to export an empty {schema.__name__} log to {path}")
        try:
            return self.write_text(path, self.render(records, schema))
        except OSError as e:
            raise ConfigurationError(f"cannot write {path}: {e}") from e

    def read(self, path: str | Path, schema: type[BaseModel]) -> list[BaseModel]:
        source = self.resolve(path)
        with source.open(newline="") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames != self.columns(schema):
                raise CorruptionError(f"{source}: header {reader.fieldnames} does not match {schema.__name__}")
            try:
                return [
                    schema.model_validate({key: (None if value == "" else value) for key, value in row.items()})
                    for row in reader
                ]
            except ValidationError as e:
                raise CorruptionError(f"{source}: {e}") from e
