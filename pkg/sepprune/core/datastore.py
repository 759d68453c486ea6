import json
import logging
import os
import subprocess
from typing import Any, Callable, Dict, Iterable, Optional, TypeVar

from pandas import DataFrame

import sepprune
from sepprune.core.errors import ArtifactExistsError, StageOrderError

log = logging.getLogger("root")

T = TypeVar("T")


def version_string() -> str:
    """`git describe --always --dirty` of the source tree, or the package version outside a git checkout."""
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(sepprune.__file__)),
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return sepprune.__version__
    if described.returncode != 0 or not described.stdout.strip():
        return sepprune.__version__
    return described.stdout.strip()


class ArtifactStore(object):
    """
    The output directory of a run. Writing an artifact that already exists is refused unless the store was
    opened with force; reading one that does not exist yet means a stage ran before its inputs were made.
    """

    def __init__(self, root: str, force: bool = False) -> None:
        self.root = os.path.abspath(root)
        self.force = force
        os.makedirs(self.root, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def exists(self, name: str) -> bool:
        return os.path.exists(self.path(name))

    def check_writable(self, names: Iterable[str]) -> None:
        existing = [name for name in names if self.exists(name)]
        if existing and not self.force:
            raise ArtifactExistsError(
                "Refusing to overwrite {} in {}; pass --force to replace them".format(", ".join(existing), self.root)
            )

    def writable(self, name: str) -> str:
        self.check_writable([name])
        return self.path(name)

    def require(self, name: str, stage: str, producer: str) -> str:
        if not self.exists(name):
            raise StageOrderError(
                "Stage '{}' needs {} in {}; run '{}' first".format(stage, name, self.root, producer)
            )
        return self.path(name)

    def write_json(self, name: str, values: Dict[str, Any]) -> str:
        path = self.writable(name)
        with open(path, "w") as f:
            json.dump(values, f, indent=2, sort_keys=True)
        log.debug("Wrote {}".format(path))
        return path

    def read_json(self, name: str) -> Dict[str, Any]:
        with open(self.path(name)) as f:
            return json.load(f)

    def write_frame(self, name: str, frame: DataFrame) -> str:
        path = self.writable(name)
        log.debug("Storing DataFrame at {}".format(path))
        frame.to_csv(path, index=False)
        return path

    def get_or_compute(
        self, name: str, compute: Callable[[], T], save: Callable[[T, str], None], load: Callable[[str], T]
    ) -> T:
        """Loads `name` when present, otherwise computes it and saves it there."""
        path = self.path(name)
        if os.path.exists(path):
            log.info("Found {}, loading".format(path))
            return load(path)
        log.info("No {}, computing".format(path))
        result = compute()
        save(result, path)
        return result

    def write_manifest(
        self,
        stage: str,
        config_hash: str,
        seeds: Dict[str, int],
        outputs: Iterable[str],
        extra: Optional[Dict[str, Any]] = None,
    ) -> str:
        manifest = {
            "stage": stage,
            "config_hash": config_hash,
            "seeds": seeds,
            "version": version_string(),
            "outputs": list(outputs),
        }
        manifest.update(extra or {})
        return self.write_json("{}.manifest.json".format(stage), manifest)
