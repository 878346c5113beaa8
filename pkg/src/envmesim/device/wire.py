"""64-byte submission and 16-byte completion queue entries."""

from __future__ import annotations

import struct
from dataclasses import dataclass

SQE_SIZE = 64
CQE_SIZE = 16

_SQE = struct.Struct("<BBHIQQQQ6I")
_CQE = struct.Struct("<IIHHHH")
assert _SQE.size == SQE_SIZE and _CQE.size == CQE_SIZE

# Admin command set
ADM_DELETE_IO_SQ = 0x00
ADM_CREATE_IO_SQ = 0x01
ADM_GET_LOG_PAGE = 0x02
ADM_DELETE_IO_CQ = 0x04
ADM_CREATE_IO_CQ = 0x05
ADM_IDENTIFY = 0x06
ADM_SET_FEATURES = 0x09
ADM_GET_FEATURES = 0x0A

# NVM command set
IO_FLUSH = 0x00
IO_WRITE = 0x01
IO_READ = 0x02

FEAT_NUM_QUEUES = 0x07

CNS_NAMESPACE = 0x00
CNS_CONTROLLER = 0x01
CNS_ACTIVE_NS_LIST = 0x02

# Status field (15 bits): SC in bits 7:0, SCT in bits 10:8, DNR in bit 14.
SCT_GENERIC = 0
SCT_COMMAND = 1
DNR = 1 << 14


def status(sc: int, sct: int = SCT_GENERIC, dnr: bool = False) -> int:
    return (sct << 8) | sc | (DNR if dnr and sc else 0)


SC_SUCCESS = status(0x00)
SC_INVALID_OPCODE = status(0x01, dnr=True)
SC_INVALID_FIELD = status(0x02, dnr=True)
SC_DATA_TRANSFER_ERROR = status(0x04)
SC_INTERNAL_ERROR = status(0x06)
SC_INVALID_NAMESPACE = status(0x0B, dnr=True)
SC_LBA_OUT_OF_RANGE = status(0x80, dnr=True)
SC_CQ_INVALID = status(0x00, SCT_COMMAND, dnr=True)
SC_INVALID_QID = status(0x01, SCT_COMMAND, dnr=True)
SC_INVALID_QSIZE = status(0x02, SCT_COMMAND, dnr=True)
SC_INVALID_QUEUE_DELETION = status(0x0C, SCT_COMMAND, dnr=True)

STATUS_NAMES = {
    SC_SUCCESS: "success",
    SC_INVALID_OPCODE: "invalid-opcode",
    SC_INVALID_FIELD: "invalid-field",
    SC_DATA_TRANSFER_ERROR: "data-transfer-error",
    SC_INTERNAL_ERROR: "internal-error",
    SC_INVALID_NAMESPACE: "invalid-namespace",
    SC_LBA_OUT_OF_RANGE: "lba-out-of-range",
    SC_CQ_INVALID: "cq-invalid",
    SC_INVALID_QID: "invalid-qid",
    SC_INVALID_QSIZE: "invalid-qsize",
    SC_INVALID_QUEUE_DELETION: "invalid-queue-deletion",
}


def status_name(sts: int) -> str:
    return STATUS_NAMES.get(sts, f"status-{sts:#x}")


@dataclass
class SubmissionEntry:
    opcode: int
    cid: int = 0
    nsid: int = 0
    prp1: int = 0
    prp2: int = 0
    cdw10: int = 0
    cdw11: int = 0
    cdw12: int = 0
    cdw13: int = 0
    cdw14: int = 0
    cdw15: int = 0
    flags: int = 0
    mptr: int = 0

    def pack(self) -> bytes:
        return _SQE.pack(self.opcode, self.flags, self.cid, self.nsid, 0, self.mptr, self.prp1, self.prp2,
                         self.cdw10, self.cdw11, self.cdw12, self.cdw13, self.cdw14, self.cdw15)

    @classmethod
    def unpack(cls, raw: bytes) -> "SubmissionEntry":
        if len(raw) != SQE_SIZE:
            raise ValueError("submission entry must be 64 bytes")
        (op, flags, cid, nsid, _, mptr, prp1, prp2, c10, c11, c12, c13, c14, c15) = _SQE.unpack(raw)
        return cls(op, cid, nsid, prp1, prp2, c10, c11, c12, c13, c14, c15, flags, mptr)

    # IO command fields
    @property
    def slba(self) -> int:
        return self.cdw10 | (self.cdw11 << 32)

    @property
    def nlb(self) -> int:
        return (self.cdw12 & 0xFFFF) + 1


@dataclass
class CompletionEntry:
    result: int = 0
    sq_head: int = 0
    sq_id: int = 0
    cid: int = 0
    status: int = 0
    phase: int = 0

    def pack(self) -> bytes:
        return _CQE.pack(self.result, 0, self.sq_head, self.sq_id, self.cid,
                         ((self.status & 0x7FFF) << 1) | (self.phase & 1))

    @classmethod
    def unpack(cls, raw: bytes) -> "CompletionEntry":
        if len(raw) != CQE_SIZE:
            raise ValueError("completion entry must be 16 bytes")
        result, _, sqhd, sqid, cid, sf = _CQE.unpack(raw)
        return cls(result, sqhd, sqid, cid, sf >> 1, sf & 1)

    @property
    def ok(self) -> bool:
        return self.status == SC_SUCCESS


def io_command(opcode: int, cid: int, slba: int, nlb: int, prp1: int = 0, prp2: int = 0, nsid: int = 1) -> SubmissionEntry:
    if not 1 <= nlb <= 0x10000:
        raise ValueError("block count must be in [1, 65536]")
    return SubmissionEntry(opcode, cid, nsid, prp1, prp2, slba & 0xFFFFFFFF, slba >> 32, nlb - 1)


def create_io_cq(cid: int, qid: int, size: int, base: int) -> SubmissionEntry:
    return SubmissionEntry(ADM_CREATE_IO_CQ, cid, prp1=base, cdw10=qid | ((size - 1) << 16), cdw11=0x1)


def create_io_sq(cid: int, qid: int, size: int, base: int, cqid: int) -> SubmissionEntry:
    return SubmissionEntry(ADM_CREATE_IO_SQ, cid, prp1=base, cdw10=qid | ((size - 1) << 16), cdw11=0x1 | (cqid << 16))


def delete_io_sq(cid: int, qid: int) -> SubmissionEntry:
    return SubmissionEntry(ADM_DELETE_IO_SQ, cid, cdw10=qid)


def delete_io_cq(cid: int, qid: int) -> SubmissionEntry:
    return SubmissionEntry(ADM_DELETE_IO_CQ, cid, cdw10=qid)


def identify(cid: int, cns: int, prp1: int, nsid: int = 0) -> SubmissionEntry:
    return SubmissionEntry(ADM_IDENTIFY, cid, nsid, prp1, cdw10=cns)


def set_num_queues(cid: int, nsq: int, ncq: int) -> SubmissionEntry:
    return SubmissionEntry(ADM_SET_FEATURES, cid, cdw10=FEAT_NUM_QUEUES, cdw11=(nsq - 1) | ((ncq - 1) << 16))
