"""Console logging for backend calls, generations and knowledge events."""

import json
import logging
from datetime import datetime, timezone
from typing import Any, Dict, Optional


class UsageLogger:
    """Logs model traffic and search progress as one-line JSON summaries."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def configure(self, level: str = "INFO"):
        """Install the console handler. Called once by the command line entry point."""
        logging.basicConfig(
            level=getattr(logging, level.upper(), logging.INFO),
            format='%(asctime)s - %(levelname)s - %(message)s',
            handlers=[logging.StreamHandler()],
            force=True,
        )

    def log_llm_call(self, tag: str, backend_id: str, sequence: int, prompt: str,
                     response: str, latency_ms: float, attempts: int = 1,
                     error: Optional[str] = None):
        """Log one completion request: summary at INFO, full text at DEBUG."""
        log_data = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "sequence": sequence,
            "tag": tag,
            "backend": backend_id,
            "prompt_length": len(prompt),
            "response_length": len(response),
            "latency_ms": round(latency_ms, 3),
            "attempts": attempts,
            "error": error,
            "success": error is None,
        }
        self.logger.info(f"LLM_CALL_SUMMARY: {json.dumps(log_data)}")

        self.logger.debug(f"=== PROMPT ({tag} #{sequence}) ===")
        self.logger.debug(prompt)
        self.logger.debug(f"=== RESPONSE ({tag} #{sequence}) ===")
        self.logger.debug(response)

        if error:
            self.logger.error(f"LLM_ERROR: {error}")

    def log_generation(self, generation: int, best_score: float, valid_ratio: Optional[float],
                       library_size: int, samples: int):
        log_data = {
            "generation": generation,
            "best_nmse": best_score,
            "valid_ratio": valid_ratio,
            "library_size": library_size,
            "samples": samples,
        }
        self.logger.info(f"GENERATION: {json.dumps(log_data)}")

    def log_knowledge(self, action: str, piece_id: str, definition: str,
                      improvement: float, library_size: int):
        log_data = {
            "action": action,
            "piece": piece_id,
            "definition": definition,
            "improvement": improvement,
            "library_size": library_size,
        }
        self.logger.info(f"KNOWLEDGE: {json.dumps(log_data)}")

    def log_stats(self, label: str, stats: Dict[str, Any]):
        self.logger.info(f"{label.upper()}: {json.dumps(stats, default=str)}")

    def log_error(self, error_type: str, error_message: str):
        self.logger.error(f"ERROR: {error_type} - {error_message}")


# Global logger instance
usage_logger = UsageLogger()
