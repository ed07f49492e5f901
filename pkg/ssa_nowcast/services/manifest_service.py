"""Run manifests written next to every artifact-producing command."""
import json
import logging
import platform
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import psutil

from .. import __version__
from ..models import RunManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def host_facts() -> Dict[str, object]:
    memory = psutil.virtual_memory()
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "physical_cores": psutil.cpu_count(logical=False),
        "logical_cores": psutil.cpu_count(logical=True),
        "total_memory_bytes": int(memory.total),
    }


def write_manifest(manifest: RunManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, ensure_ascii=False, sort_keys=True)
    logger.debug("wrote manifest %s", path)
    return path


def read_manifest(path) -> RunManifest:
    with open(path, "r", encoding="utf-8") as f:
        return RunManifest.from_dict(json.load(f))


class ManifestService:
    """Collects one command's configuration, inputs and outputs, then writes them once."""

    def __init__(self, command: str, argv: List[str], config: Dict[str, object], seed: int = 0):
        self.manifest = RunManifest(command=command, argv=list(argv), config=dict(config), seed=seed,
                                    tool_version=__version__, host=host_facts(),
                                    start_time=datetime.now())

    def add_input(self, path):
        self.manifest.inputs.append(str(path))

    def add_output(self, path):
        self.manifest.outputs.append(str(path))

    def finish(self, output_dir, name: Optional[str] = None) -> Path:
        self.manifest.end_time = datetime.now()
        return write_manifest(self.manifest, Path(output_dir) / (name or MANIFEST_NAME))
