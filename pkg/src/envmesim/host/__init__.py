"""Simulated host: physical memory, IOMMU-gated bus, NVMe driver and boot flow."""

from .memory import HostMemory, Region, KERNEL_SIGNATURE, MODULE_MAGIC, MODULE_FLAG_OFFSET
from .iommu import Bus, ConfigError, DmaFault, IommuConfig

__all__ = [
    "Bus", "ConfigError", "DmaFault", "HostMemory", "IommuConfig", "KERNEL_SIGNATURE",
    "MODULE_FLAG_OFFSET", "MODULE_MAGIC", "Region",
]
