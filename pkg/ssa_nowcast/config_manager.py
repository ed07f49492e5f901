"""Runtime configuration management for the nowcasting engine."""
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import psutil

logger = logging.getLogger(__name__)


def _default_threads() -> int:
    return psutil.cpu_count(logical=False) or 1


@dataclass
class RuntimeConfig:
    """Engine-wide defaults; CLI flags override them per command."""
    threads: int = field(default_factory=_default_threads)
    binarization_threshold: float = 0.5
    train_stride: int = 1
    eval_stride: int = 6
    split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    rain_cutoff: float = 0.0
    batch_size: int = 6
    log_level: str = "INFO"

    def to_dict(self):
        return {
            "threads": self.threads,
            "binarization_threshold": self.binarization_threshold,
            "train_stride": self.train_stride,
            "eval_stride": self.eval_stride,
            "split_fractions": list(self.split_fractions),
            "rain_cutoff": self.rain_cutoff,
            "batch_size": self.batch_size,
            "log_level": self.log_level,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            threads=int(data.get("threads", _default_threads())),
            binarization_threshold=float(data.get("binarization_threshold", 0.5)),
            train_stride=int(data.get("train_stride", 1)),
            eval_stride=int(data.get("eval_stride", 6)),
            split_fractions=tuple(data.get("split_fractions", (0.7, 0.15, 0.15))),
            rain_cutoff=float(data.get("rain_cutoff", 0.0)),
            batch_size=int(data.get("batch_size", 6)),
            log_level=data.get("log_level", "INFO"),
        )


class ConfigManager:
    """Manages runtime configuration persistence."""

    def __init__(self, config_path: Optional[str] = None):
        """Initialize the configuration manager."""
        if config_path is None:
            config_path = os.getenv("SSA_CONFIG") or str(Path.home() / ".ssa_nowcast" / "config.json")
        self.config_path = Path(config_path)
        self._config: Optional[RuntimeConfig] = None
        self.load()

    def load(self) -> RuntimeConfig:
        """Load configuration from file, falling back to defaults."""
        if self.config_path.exists():
            try:
                with open(self.config_path, "r", encoding="utf-8") as f:
                    self._config = RuntimeConfig.from_dict(json.load(f))
            except (OSError, ValueError, TypeError) as ex:
                logger.warning("Ignoring unreadable config %s: %s", self.config_path, ex)
                self._config = RuntimeConfig()
        else:
            self._config = RuntimeConfig()

        threads = os.getenv("SSA_THREADS")
        if threads:
            try:
                self._config.threads = max(1, int(threads))
            except ValueError:
                logger.warning("SSA_THREADS=%r is not an integer; using %d",
                               threads, self._config.threads)
        return self._config

    def save(self):
        """Save configuration to file."""
        self.config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.config_path, "w", encoding="utf-8") as f:
            json.dump(self._config.to_dict(), f, indent=2, ensure_ascii=False)

    def get_config(self) -> RuntimeConfig:
        """Get the current configuration."""
        if self._config is None:
            self.load()
        return self._config

    def update_config(self, config: RuntimeConfig):
        """Update and save configuration."""
        self._config = config
        self.save()


def load_runtime_config(config_path: Optional[str] = None) -> RuntimeConfig:
    return ConfigManager(config_path).get_config()


def save_runtime_config(config: RuntimeConfig, config_path: Optional[str] = None):
    ConfigManager(config_path).update_config(config)
