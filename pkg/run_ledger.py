#!/usr/bin/env python3
"""
Run Ledger
==========

Append-only JSON record of toolkit runs (command, config hash, outputs).
The ledger sits outside every command's deterministic outputs.
"""

import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

MAX_RECORDS = 1000


class RunLedger:
    """JSON ledger of command runs"""

    def __init__(self, ledger_file: Optional[str] = None):
        self.ledger_file = ledger_file or os.getenv("VORTEX_RUN_LEDGER", "vortex_runs.json")
        self._ensure_ledger_file()

    def _ensure_ledger_file(self):
        if not os.path.exists(self.ledger_file):
            with open(self.ledger_file, "w") as f:
                json.dump([], f)

    def _load(self) -> List[Dict[str, Any]]:
        try:
            with open(self.ledger_file, "r") as f:
                return json.load(f)
        except (json.JSONDecodeError, FileNotFoundError):
            return []

    def record(self, command: str, details: Dict[str, Any]) -> str:
        """
        Record a run and return its id.

        Args:
            command: Subcommand name (e.g. 'simulate', 'fit')
            details: Config hash, outputs, exit status ...
        """
        run_id = f"{command}_{datetime.now().strftime('%Y%m%d_%H%M%S_%f')}"
        runs = self._load()
        runs.append({
            "id": run_id,
            "timestamp": datetime.now().isoformat(),
            "command": command,
            "details": details,
        })
        runs = runs[-MAX_RECORDS:]
        with open(self.ledger_file, "w") as f:
            json.dump(runs, f, indent=2)
        logger.info(f"📝 Run recorded: {command} ({run_id})")
        return run_id

    def recent(self, limit: int = 50, command: Optional[str] = None) -> List[Dict[str, Any]]:
        runs = self._load()
        if command:
            runs = [r for r in runs if r.get("command") == command]
        return runs[-limit:]
