"""
StageBase - Abstract Base Class for SpyGR command-line workflows

Each subcommand (verify, bench, train, ablate, heatmap) is a stage that:
- Resolves its configuration and output directory
- Writes canonical JSON reports and other artifacts under that directory
- Records a RunManifest beside its outputs
- Maps its outcome to the CLI exit-code contract
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
import logging
import os
from typing import Any, Dict, List, Optional

from .. import __version__
from ..core.errors import SerializationError
from .json_utils import load_json_file, save_json_file

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2

MANIFEST_FILENAME = "run_manifest.json"


@dataclass
class RunManifest:
    """
    Provenance of one artifact-producing run.

    Attributes:
        subcommand: CLI workflow that produced the outputs
        config: fully resolved configuration
        seed: master seed
        version: library version
        outputs: artifact paths relative to the output directory
    """
    subcommand: str
    config: Dict[str, Any]
    seed: int
    version: str = __version__
    outputs: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "outputs": sorted(self.outputs),
        }


@dataclass
class StageOutcome:
    exit_code: int
    report: Dict[str, Any]
    output_dir: str
    manifest_path: Optional[str] = None


class StageBase(ABC):
    """
    Abstract base class for all CLI workflows.

    Attributes:
        stage_name: Human-readable workflow name
        subcommand: CLI subcommand this stage serves
        report_filename: Name of the main JSON report
    """

    stage_name: str = "Base Stage"
    subcommand: str = "base"
    report_filename: str = "report.json"

    def __init__(self, config: Dict[str, Any], output_dir: Optional[str] = None):
        """
        Args:
            config: resolved configuration for this run
            output_dir: artifact directory (default `output/<subcommand>`)
        """
        self.config = dict(config)
        self.output_dir = output_dir or os.path.join("output", self.subcommand)
        self.logger = logging.getLogger(self.__class__.__name__)
        self.outputs: List[str] = []

    @property
    def seed(self) -> int:
        return int(self.config.get("seed", 0))

    # =========================================================================
    # JSON I/O Operations
    # =========================================================================

    def load_input(self, file_path: str) -> Any:
        data, error = load_json_file(file_path)
        if error:
            raise SerializationError(file_path, error)
        return data

    def save_output(self, data: Any, filename: Optional[str] = None) -> str:
        """
        Write `data` as canonical JSON into the output directory.

        Returns:
            Path to the saved file.
        """
        path = self.get_output_path(filename or self.report_filename)
        error = save_json_file(path, data)
        if error:
            raise SerializationError(path, error)
        self.record_output(path)
        self.logger.info(f"Saved {os.path.basename(path)} to {self.output_dir}")
        return path

    def record_output(self, path: str) -> None:
        rel = os.path.relpath(path, self.output_dir).replace(os.sep, "/")
        if rel not in self.outputs:
            self.outputs.append(rel)

    def write_manifest(self) -> str:
        manifest = RunManifest(self.subcommand, self.config, self.seed, outputs=list(self.outputs))
        path = self.get_output_path(MANIFEST_FILENAME)
        error = save_json_file(path, manifest)
        if error:
            raise SerializationError(path, error)
        return path

    # =========================================================================
    # Logging Helpers
    # =========================================================================

    def log_start(self) -> None:
        self.logger.info(f"Starting {self.stage_name} (seed={self.seed})")

    def log_complete(self, exit_code: int) -> None:
        status = "passed" if exit_code == EXIT_OK else "FAILED"
        self.logger.info(f"{self.stage_name} {status} -> {self.output_dir}")

    def log_progress(self, current: int, total: int, message: Optional[str] = None) -> None:
        progress = f"Processing {current}/{total}"
        if message:
            progress += f": {message}"
        self.logger.info(progress)

    # =========================================================================
    # Output Path Utilities
    # =========================================================================

    def get_output_path(self, filename: str) -> str:
        return os.path.join(self.output_dir, filename)

    def ensure_output_dir(self, subdir: Optional[str] = None) -> str:
        path = self.output_dir if not subdir else os.path.join(self.output_dir, subdir)
        os.makedirs(path, exist_ok=True)
        return path

    # =========================================================================
    # Abstract Methods
    # =========================================================================

    @abstractmethod
    def process(self) -> Dict[str, Any]:
        """
        Run the workflow and return its report.

        Subclasses write any extra artifacts themselves through
        `save_output` / `record_output`.
        """

    def exit_code(self, report: Dict[str, Any]) -> int:
        """Exit status implied by the report; 0 unless a stage says otherwise."""
        return EXIT_OK

    # =========================================================================
    # Main Execution
    # =========================================================================

    def run(self) -> StageOutcome:
        self.log_start()
        self.ensure_output_dir()
        report = self.process()
        self.save_output(report)
        manifest_path = self.write_manifest()
        code = self.exit_code(report)
        self.log_complete(code)
        return StageOutcome(code, report, self.output_dir, manifest_path)
