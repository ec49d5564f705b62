import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import pandas as pd

from safe_explore.config import settings
from safe_explore.errors import ConfigError
from safe_explore.mdp_core import TabularMDP, dump_mdp, load_mdp
from safe_explore.models import GridSpec
from safe_explore.utils.helpers import ensure_directory_exists

PathLike = Union[str, Path]


class LocalStorage:
    """Experiment inputs and outputs on the local filesystem."""

    def __init__(self, base_path: Optional[PathLike] = None):
        self.storage_path = Path(base_path if base_path is not None else settings.output_dir)
        ensure_directory_exists(str(self.storage_path))

    def resolve(self, name: PathLike) -> Path:
        """Relative names live under the storage directory."""
        path = Path(name)
        return path if path.is_absolute() else self.storage_path / path

    def save_csv(self, name: PathLike, rows: Union[pd.DataFrame, Iterable[Dict[str, Any]]]) -> str:
        """Write rows as UTF-8 CSV with a header and no index."""
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
        path = self.resolve(name)
        ensure_directory_exists(str(path.parent))
        frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
        return str(path)

    def load_csv(self, name: PathLike) -> pd.DataFrame:
        return pd.read_csv(self.resolve(name))

    def save_json(self, name: PathLike, payload: Any) -> str:
        path = self.resolve(name)
        ensure_directory_exists(str(path.parent))
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        return str(path)

    def load_json(self, name: PathLike) -> Any:
        return json.loads(self.resolve(name).read_text(encoding="utf-8"))

    def read_arm_parameters(self, path: PathLike) -> List[float]:
        """One damage probability per line; blanks and '#' comments ignored."""
        mus = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                mus.append(float(text))
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: not a number: {text!r}") from None
        if not mus:
            raise ConfigError(f"{path}: no arm parameters found")
        return mus

    def read_grid_map(self, path: PathLike) -> str:
        """Raw map text; parse it with ``GridSpec.from_map``."""
        text = Path(path).read_text(encoding="utf-8")
        try:
            GridSpec.from_map(text)
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from None
        return text

    def read_mdp(self, path: PathLike) -> TabularMDP:
        path = Path(path)
        return load_mdp(path.read_text(encoding="utf-8"), name=path.stem)

    def write_mdp(self, mdp: TabularMDP, name: PathLike) -> str:
        path = self.resolve(name)
        ensure_directory_exists(str(path.parent))
        path.write_text(dump_mdp(mdp), encoding="utf-8")
        return str(path)

    def file_exists(self, name: PathLike) -> bool:
        return self.resolve(name).exists()
