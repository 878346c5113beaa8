"""What the bootloader needs from grub.cfg: where it is and the kernel command line."""

from __future__ import annotations

import re

from ..diskfs.errors import NotFound

GRUB_CFG_PATHS = ("/boot/grub/grub.cfg", "/grub/grub.cfg", "/boot/grub2/grub.cfg")

KERNEL_LINE = re.compile(rb"^(\s*(?:linux|linuxefi|linux16)\s+\S+)([^\r\n]*?)(\s*)$")


def kernel_cmdline(data: bytes) -> str | None:
    """Arguments of the first kernel line (the default menu entry)."""
    for line in data.splitlines():
        m = KERNEL_LINE.match(line.rstrip(b"\r\n"))
        if m:
            return m.group(2).decode("utf-8", "replace").strip()
    return None


def find_cfg(fs, paths=GRUB_CFG_PATHS) -> str:
    for p in paths:
        try:
            fs.lookup(p)
            return p
        except NotFound:
            continue
    raise NotFound(f"no GRUB config at {', '.join(paths)}")
