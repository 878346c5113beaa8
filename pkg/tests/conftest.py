import shutil
import sys

import pytest

from envmesim.scenario.imagebuilder import FileSpec, ImageSpec, PartitionSpec, build_image
from envmesim.testbed import Testbed

GRUB_CFG = (b"set default=0\nset timeout=1\nmenuentry 'Linux' {\n"
            b"  linux /boot/vmlinuz root=/dev/nvme0n1p1 ro quiet splash\n  initrd /boot/initrd.img\n}\n")


def boot_spec(seed=5, extra=(), size=16 << 20, **part) -> ImageSpec:
    files = [FileSpec("/boot/grub/grub.cfg", GRUB_CFG), FileSpec("/boot/vmlinuz", size=65536),
             FileSpec("/sbin/init", size=8192, mode=0o755), *extra]
    return ImageSpec(size_bytes=size, seed=seed, partitions=[PartitionSpec(files=files, **part)])


@pytest.fixture(scope="session")
def boot_image():
    return build_image(boot_spec())


@pytest.fixture
def testbed(boot_image):
    made = []

    def make(image=boot_image, **kw):
        tb = Testbed(image=bytes(image.image), block_size=image.block_size, memory_size=kw.pop("memory_size", 16 << 20),
                     **kw)
        made.append(tb)
        return tb

    yield make
    for tb in made:
        tb.close()


def need_tool(name):
    path = shutil.which(name) or shutil.which(name, path="/sbin:/usr/sbin:/usr/bin")
    if path is None:
        pytest.skip(f"{name} not installed")
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.VERDICTS:
        terminalreporter.write_line(line)
