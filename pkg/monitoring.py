"""
Performance monitoring for training runs.
Tracks wall-clock per epoch and per run; nothing here bounds runtime.
"""

import time
from typing import Any, Dict, List, Optional


class PerformanceMonitor:
    """Monitor training performance metrics"""

    def __init__(self):
        self.epochs: List[Dict[str, Any]] = []
        self.runs: List[Dict[str, Any]] = []

    def record_epoch(self, run_id: str, epoch: int, seconds: float, samples: int,
                     train_loss: float, val_loss: Optional[float] = None):
        """Record one finished epoch"""
        self.epochs.append({
            "timestamp": time.time(),
            "run_id": run_id,
            "epoch": epoch,
            "seconds": seconds,
            "samples": samples,
            "train_loss": train_loss,
            "val_loss": val_loss,
        })

    def record_run(self, run_id: str, seconds: float, epochs_run: int, best_epoch: int,
                   final_train_loss: float, final_val_loss: Optional[float] = None):
        """Record a finished training run"""
        self.runs.append({
            "timestamp": time.time(),
            "run_id": run_id,
            "seconds": seconds,
            "epochs_run": epochs_run,
            "best_epoch": best_epoch,
            "final_train_loss": final_train_loss,
            "final_val_loss": final_val_loss,
        })

    def get_average_performance(self) -> Dict[str, float]:
        """Get average epoch metrics"""
        if not self.epochs:
            return {}
        total_time = sum(e["seconds"] for e in self.epochs)
        total_samples = sum(e["samples"] for e in self.epochs)
        return {
            "avg_epoch_seconds": total_time / len(self.epochs),
            "samples_per_second": total_samples / total_time if total_time > 0 else 0.0,
            "avg_epochs_per_run": (sum(r["epochs_run"] for r in self.runs) / len(self.runs)) if self.runs else 0.0,
        }

    def get_total_epochs(self) -> int:
        return len(self.epochs)

    def get_total_runs(self) -> int:
        return len(self.runs)

    def clear_metrics(self):
        """Clear all recorded metrics"""
        self.epochs.clear()
        self.runs.clear()
