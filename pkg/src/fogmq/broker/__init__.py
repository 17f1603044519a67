"""Runnable brokering system: servers hosting migratable device clones."""
from .clone import CloneRuntime, CloneState, CloneStatus, SeqWindow, SubStatus, clone_id_for
from .device import AuditReport, DeviceEmulator, audit_delivery, cutover_windows
from .gossip import GossipView, ViewEntry
from .monitors import DemandMonitor, LatencyMonitor, QuantileSketch, RateWindow
from .registry import MemoryRegistry, RegistryEntry, RegistryError, RemoteRegistry
from .scenarios import colocation_trial, transparency_scenario
from .server import DeviceRecord, FogMQServer, MigrationReport, ServerConfig, UniquenessAudit, active_census

__all__ = [
    "AuditReport", "CloneRuntime", "CloneState", "CloneStatus", "DemandMonitor", "DeviceEmulator",
    "DeviceRecord", "FogMQServer", "GossipView", "LatencyMonitor", "MemoryRegistry", "MigrationReport",
    "QuantileSketch", "RateWindow", "RegistryEntry", "RegistryError", "RemoteRegistry", "SeqWindow",
    "ServerConfig", "SubStatus", "UniquenessAudit", "ViewEntry", "active_census", "audit_delivery",
    "clone_id_for", "colocation_trial", "cutover_windows", "transparency_scenario",
]
