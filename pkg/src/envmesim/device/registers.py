"""BAR0 register map of the NVMe-over-PCIe transport (see docs/registers.md)."""

from __future__ import annotations

from dataclasses import dataclass, field

CAP = 0x00
VS = 0x08
INTMS = 0x0C
INTMC = 0x10
CC = 0x14
CSTS = 0x1C
NSSR = 0x20
AQA = 0x24
ASQ = 0x28
ACQ = 0x30
DOORBELL_BASE = 0x1000

# name -> (offset, width in bytes, writable)
REGISTER_MAP = {
    "CAP": (CAP, 8, False),
    "VS": (VS, 4, False),
    "INTMS": (INTMS, 4, True),
    "INTMC": (INTMC, 4, True),
    "CC": (CC, 4, True),
    "CSTS": (CSTS, 4, False),
    "NSSR": (NSSR, 4, True),
    "AQA": (AQA, 4, True),
    "ASQ": (ASQ, 8, True),
    "ACQ": (ACQ, 8, True),
}

NVME_CLASS_CODE = 0x010802
DMA_CLASS_CODE = 0x080100
VERSION_1_4 = 0x00010400

# CC fields
CC_EN = 1 << 0
CC_SHN_SHIFT = 14
CC_SHN_MASK = 0x3 << CC_SHN_SHIFT
# CSTS fields
CSTS_RDY = 1 << 0
CSTS_CFS = 1 << 1
CSTS_SHST_SHIFT = 2
CSTS_SHST_MASK = 0x3 << CSTS_SHST_SHIFT

SHST_NORMAL = 0
SHST_PROCESSING = 1
SHST_COMPLETE = 2


def cap_value(mqes: int, timeout_500ms: int = 1, dstrd: int = 0) -> int:
    """CAP: MQES (0-based), CQR=1, TO, DSTRD, NVM command set, MPSMIN=MPSMAX=4 KiB."""
    return ((mqes - 1) & 0xFFFF) | (1 << 16) | ((timeout_500ms & 0xFF) << 24) \
        | ((dstrd & 0xF) << 32) | (1 << 37)


def cap_mqes(cap: int) -> int:
    return (cap & 0xFFFF) + 1


def cap_dstrd(cap: int) -> int:
    return (cap >> 32) & 0xF


def doorbell_offset(qid: int, completion: bool, dstrd: int = 0) -> int:
    return DOORBELL_BASE + (2 * qid + int(completion)) * (4 << dstrd)


def csts_shst(csts: int) -> int:
    return (csts & CSTS_SHST_MASK) >> CSTS_SHST_SHIFT


@dataclass
class ControllerRegisters:
    cap: int = 0
    vs: int = VERSION_1_4
    intms: int = 0
    cc: int = 0
    csts: int = 0
    aqa: int = 0
    asq: int = 0
    acq: int = 0
    class_code: int = NVME_CLASS_CODE
    doorbells: dict = field(default_factory=dict)

    @property
    def enabled(self) -> bool:
        return bool(self.cc & CC_EN)

    @property
    def ready(self) -> bool:
        return bool(self.csts & CSTS_RDY)

    @property
    def shn(self) -> int:
        return (self.cc & CC_SHN_MASK) >> CC_SHN_SHIFT

    @property
    def shst(self) -> int:
        return csts_shst(self.csts)

    def set_shst(self, value: int) -> None:
        if value < self.shst:
            raise ValueError("shutdown status can only move forward without a reset")
        self.csts = (self.csts & ~CSTS_SHST_MASK) | (value << CSTS_SHST_SHIFT)
