#!/usr/bin/env python3
"""
Resource Monitor Module
=======================

Sizes the Monte-Carlo worker pool from the host CPU load so that large path
batches do not starve the machine.

Load Zones:
- Green (below busy threshold): all allowed workers
- Yellow (busy threshold to +10%): half the workers
- Red (above): a single worker, warning logged

Worker count never changes results: path streams are keyed by path index
and chunk results are merged in chunk order.
"""

import logging
import os
import threading
from collections import deque
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Dict, Optional

import psutil

logger = logging.getLogger(__name__)


@dataclass
class ResourceStatus:
    """Host load snapshot."""
    cpu_percent: float
    avg_cpu: float
    available_memory_mb: float
    load_zone: str
    max_workers: int
    last_updated: datetime


class LoadZone:
    """Load zone names."""
    GREEN = "green"
    YELLOW = "yellow"
    RED = "red"


class ResourceMonitor:
    """
    Host resource monitor used to pick the worker count for path chunks.

    Features:
    - On-demand CPU sampling with a short rolling history
    - Zone classification against SEPFILTER_CPU_BUSY_THRESHOLD
    - Worker cap from SEPFILTER_THREADS (default: CPU count)
    """

    def __init__(self, busy_threshold: Optional[float] = None,
                 max_threads: Optional[int] = None, history_window: int = 30):
        """
        Initialize the resource monitor.

        Args:
            busy_threshold: CPU% at which the pool is reduced (default: env or 85%)
            max_threads: Upper bound on workers (default: env or CPU count)
            history_window: Number of samples kept for averaging
        """
        if busy_threshold is None:
            busy_threshold = float(os.getenv("SEPFILTER_CPU_BUSY_THRESHOLD", "85"))
        if max_threads is None:
            env_threads = os.getenv("SEPFILTER_THREADS")
            max_threads = int(env_threads) if env_threads else (psutil.cpu_count(logical=True) or 1)
        self.busy_threshold = busy_threshold
        self.max_threads = max(1, int(max_threads))
        self.cpu_history: deque = deque(maxlen=history_window)
        self.lock = threading.Lock()
        self.current_status: Optional[ResourceStatus] = None
        self.stats = {"samples": 0, "degraded_runs": 0}

        logger.info(f"Resource Monitor initialized - busy threshold {busy_threshold}%, "
                    f"max workers {self.max_threads}")

    def _zone(self, avg_cpu: float) -> str:
        if avg_cpu >= self.busy_threshold + 10.0:
            return LoadZone.RED
        if avg_cpu >= self.busy_threshold:
            return LoadZone.YELLOW
        return LoadZone.GREEN

    def _zone_workers(self, zone: str) -> int:
        limits = {
            LoadZone.GREEN: self.max_threads,
            LoadZone.YELLOW: max(1, self.max_threads // 2),
            LoadZone.RED: 1,
        }
        return limits.get(zone, 1)

    def sample(self) -> ResourceStatus:
        """Take one CPU/memory reading and refresh the status."""
        try:
            cpu = psutil.cpu_percent(interval=0.1)
            memory_mb = psutil.virtual_memory().available / (1024 * 1024)
        except Exception as e:
            logger.error(f"Resource sampling error: {e}")
            cpu, memory_mb = 0.0, float("nan")

        with self.lock:
            self.cpu_history.append(cpu)
            avg_cpu = sum(self.cpu_history) / len(self.cpu_history)
            zone = self._zone(avg_cpu)
            old_zone = self.current_status.load_zone if self.current_status else LoadZone.GREEN
            self.current_status = ResourceStatus(
                cpu_percent=cpu, avg_cpu=avg_cpu, available_memory_mb=memory_mb,
                load_zone=zone, max_workers=self._zone_workers(zone),
                last_updated=datetime.now(),
            )
            self.stats["samples"] += 1
            if zone != old_zone:
                logger.warning(f"Load zone changed: {old_zone} -> {zone} (CPU avg: {avg_cpu:.1f}%)")
            return self.current_status

    def recommended_workers(self, n_chunks: int) -> int:
        """Worker count for ``n_chunks`` units of work under the current load."""
        status = self.sample()
        workers = max(1, min(status.max_workers, n_chunks))
        if status.load_zone != LoadZone.GREEN:
            self.stats["degraded_runs"] += 1
            logger.warning(f"Degraded worker budget: {workers} workers "
                           f"(zone {status.load_zone}, CPU avg {status.avg_cpu:.1f}%)")
        return workers

    def get_statistics(self) -> Dict[str, Any]:
        status = self.current_status or self.sample()
        return {
            "current_status": {
                "cpu_percent": status.cpu_percent,
                "avg_cpu": status.avg_cpu,
                "available_memory_mb": status.available_memory_mb,
                "load_zone": status.load_zone,
                "max_workers": status.max_workers,
                "last_updated": status.last_updated.isoformat(),
            },
            "statistics": self.stats.copy(),
            "thresholds": {"busy_threshold": self.busy_threshold, "max_threads": self.max_threads},
        }


# Global resource monitor instance
resource_monitor = None


def initialize_resource_monitor(**kwargs) -> ResourceMonitor:
    """Initialize global resource monitor instance."""
    global resource_monitor
    if resource_monitor is None:
        resource_monitor = ResourceMonitor(**kwargs)
    return resource_monitor


def get_resource_monitor() -> ResourceMonitor:
    """Get (creating on first use) the global resource monitor instance."""
    return resource_monitor if resource_monitor is not None else initialize_resource_monitor()


def shutdown_resource_monitor() -> None:
    global resource_monitor
    resource_monitor = None
