"""
Monitoring module for the separation filtering toolkit

Contains the host resource monitor that sizes the Monte-Carlo worker pool.
"""

from .resource_monitor import ResourceMonitor, get_resource_monitor

__all__ = ["ResourceMonitor", "get_resource_monitor"]
