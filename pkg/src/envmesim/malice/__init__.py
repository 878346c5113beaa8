"""Adversarial firmware layer: activation, shadowing, RAM access, DoS, mining."""

from .activation import ActivationKey, ActivationScanner, InvalidKey, SequenceTracker, WeakKeyWarning
from .bootpattern import BootPatternDetector, LbaWindow
from .dma import InjectResult, ScanResult, inject_payload, scan_host_memory
from .engine import Malice, Playbook, PlaybookError, Step
from .grub import IOMMU_OFF_TOKENS, patch_cfg
from .matcher import Automaton, Match, MatcherState, find_all, scan_write_stream
from .mining import MiningRule, QuarantineStore, QuotaExceeded, mine_files
from .shadow import RuleConflict, ShadowRule, ShadowTable, SizeOverflow

__all__ = [
    "ActivationKey", "ActivationScanner", "Automaton", "BootPatternDetector", "IOMMU_OFF_TOKENS", "InjectResult",
    "InvalidKey", "LbaWindow", "Malice", "Match", "MatcherState", "MiningRule", "Playbook", "PlaybookError",
    "QuarantineStore", "QuotaExceeded", "RuleConflict", "ScanResult", "SequenceTracker", "ShadowRule",
    "ShadowTable", "SizeOverflow", "Step", "WeakKeyWarning", "find_all", "inject_payload", "mine_files",
    "patch_cfg", "scan_host_memory", "scan_write_stream",
]
